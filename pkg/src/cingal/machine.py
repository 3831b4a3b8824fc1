"""Machines: the execution contexts created when bundles are fired.

A machine wraps one executing bundle with the infrastructure it needs:
a machine channel (TCP control endpoint for third parties), a default
channel back to its progenitor, a connection manager for named channels,
and a capability-checked API onto the node's store, binders and VER.

Machines are isolated execution contexts inside the node daemon rather
than separate OS processes; the external contract (connectors, channels,
control protocol) is unaffected by that choice.

Bundle code is resolved through an executor registry keyed by entry-point
name; the generic installer/runner/wirer tools and the demo components
ship pre-registered.
"""

from __future__ import annotations

import base64
import socket
import threading

from . import remote, xmlcanon
from .bundle import Bundle, Datum, nested_bundle, serialize_bundle
from .channels import (
    ChannelEndpoint,
    ConnectionManager,
    Connector,
    NamedChannelEndpoint,
    channel_pair,
    recv_frame,
    send_frame,
)
from .documents import (
    STATUS_FAILED,
    STATUS_OK,
    Task,
    TaskReport,
    TaskResult,
    ToDoList,
    report_from_bytes,
    report_to_bytes,
    todolist_content,
    todolist_from_content,
)
from .errors import (
    CingalError,
    DuplicateEntry,
    PeerClosed,
    SchemaViolation,
    UnknownEntryPoint,
)
from .guid import Guid, fresh_guid
from .security import Right, Service
from .xmlcanon import element

ENTRY_INSTALLER = "uk.ac.stand.cingal.Installer"
ENTRY_RUNNER = "uk.ac.stand.cingal.Runner"
ENTRY_WIRER = "uk.ac.stand.cingal.Wirer"
ENTRY_ENTITY_MANAGER = "uk.ac.stand.cingal.EntityManager"

RUNNING = "RUNNING"
TERMINATED = "TERMINATED"


class ExecutorRegistry:
    """Maps entry-point names to behaviours callable as f(bundle, api)."""

    def __init__(self):
        self._behaviors: dict[str, object] = {}

    def register(self, entry: str, behavior) -> None:
        if entry in self._behaviors:
            raise DuplicateEntry(entry)
        self._behaviors[entry] = behavior

    def resolve(self, bundle: Bundle):
        behavior = self._behaviors.get(bundle.code.entry)
        if behavior is None:
            raise UnknownEntryPoint(
                f"{bundle.code.entry!r} (code type {bundle.code.code_type!r})")
        return behavior

    def entries(self) -> list[str]:
        return sorted(self._behaviors)


class MachineApi:
    """Mediated access to node services for one executing bundle.

    Every store/binder/VER call is capability-checked against the
    machine's signing entity before it acts.
    """

    def __init__(self, node, machine: "Machine"):
        self._node = node
        self._machine = machine

    @property
    def entity(self) -> str:
        return self._machine.entity

    @property
    def machine(self) -> "Machine":
        return self._machine

    @property
    def default(self) -> ChannelEndpoint:
        return self._machine.default_endpoint

    def channel(self, name: str) -> NamedChannelEndpoint:
        return self._machine.cm.endpoint(name)

    # --- store -----------------------------------------------------------

    def store_put(self, b: Bundle | bytes) -> Guid:
        self._node.ver.require(self.entity, Service.STORE, Right.PUT)
        return self._node.store.put(b)

    def store_get(self, key: Guid) -> Bundle:
        self._node.ver.require(self.entity, Service.STORE, Right.GET)
        return self._node.store.get(key)

    def store_get_bytes(self, key: Guid) -> bytes:
        self._node.ver.require(self.entity, Service.STORE, Right.GET)
        return self._node.store.get_bytes(key)

    # --- binders ---------------------------------------------------------

    def sbinder_put(self, name: str, key: Guid) -> None:
        self._node.ver.require(self.entity, Service.SBINDER, Right.PUT)
        self._node.sbinder.put(name, key)

    def sbinder_get(self, name: str) -> Guid:
        self._node.ver.require(self.entity, Service.SBINDER, Right.GET)
        return self._node.sbinder.get(name)

    def sbinder_remove(self, name: str) -> None:
        self._node.ver.require(self.entity, Service.SBINDER, Right.REMOVE)
        self._node.sbinder.remove(name)

    def pbinder_put(self, name: str, value) -> None:
        self._node.ver.require(self.entity, Service.PBINDER, Right.PUT)
        self._node.pbinder.put(name, value)

    def pbinder_get(self, name: str):
        self._node.ver.require(self.entity, Service.PBINDER, Right.GET)
        return self._node.pbinder.get(name)

    def pbinder_remove(self, name: str) -> None:
        self._node.ver.require(self.entity, Service.PBINDER, Right.REMOVE)
        self._node.pbinder.remove(name)

    # --- VER ---------------------------------------------------------------

    def ver_add(self, record) -> None:
        self._node.ver.add(record, caller=self.entity)

    def ver_remove(self, entity: str) -> None:
        self._node.ver.remove(entity, caller=self.entity)

    # --- execution ---------------------------------------------------------

    def spawn(self, b: Bundle) -> "Machine":
        """Fire a bundle locally; the caller needs FIRE:FIRE, the target
        bundle's own entity and signature set its capability context."""
        self._node.ver.require(self.entity, Service.FIRE, Right.FIRE)
        machine, _ = self._node.spawn_verified(b)
        return machine

    def fire_remote(self, address: str, doc: bytes) -> remote.FireHandle:
        return remote.fire(address, doc, self._node.max_frame,
                           self._node.connect_timeout)


class Machine:
    """One fired bundle plus its channels, connection manager and servers."""

    def __init__(self, node, bundle: Bundle, behavior):
        self.node = node
        self.bundle = bundle
        self.behavior = behavior
        self.entity = bundle.auth.entity
        self.machine_id = fresh_guid(node.digest)
        self.state = RUNNING
        self.cm = ConnectionManager(node.host, node.max_frame,
                                    node.connect_timeout)
        self.progenitor_endpoint, self.default_endpoint = channel_pair(
            node.max_frame)
        self._machine_listener: socket.socket | None = None
        self._resource_listener: socket.socket | None = None
        self.connector: Connector | None = None
        self._lock = threading.Lock()

    # --- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        self._machine_listener = self._listen()
        self._resource_listener = self._listen()
        self.connector = Connector(
            self.node.host,
            self._machine_listener.getsockname()[1],
            self._resource_listener.getsockname()[1],
        )
        threading.Thread(target=self._accept_control, daemon=True).start()
        threading.Thread(target=self._accept_resource, daemon=True).start()
        threading.Thread(target=self._run_executor, daemon=True).start()

    def _listen(self) -> socket.socket:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.bind((self.node.host, 0))
        sock.listen(16)
        return sock

    def _run_executor(self) -> None:
        try:
            self.behavior(self.bundle, MachineApi(self.node, self))
        except PeerClosed:
            pass
        except CingalError:
            pass
        finally:
            self.terminate()

    def terminate(self) -> None:
        with self._lock:
            if self.state == TERMINATED:
                return
            self.state = TERMINATED
        for listener in (self._machine_listener, self._resource_listener):
            if listener is not None:
                try:
                    listener.close()
                except OSError:
                    pass
        self.cm.shutdown()
        self.default_endpoint.close()
        self.progenitor_endpoint.close()
        self.node.unregister_machine(self)

    # --- machine channel (control) ------------------------------------------

    def _accept_control(self) -> None:
        while True:
            try:
                sock, _ = self._machine_listener.accept()
            except OSError:
                return
            threading.Thread(target=self._serve_control, args=(sock,),
                             daemon=True).start()

    def _serve_control(self, sock: socket.socket) -> None:
        with sock:
            while True:
                try:
                    frame = recv_frame(sock, self.node.max_frame)
                except (OSError, CingalError):
                    return
                if frame is None:
                    return
                response, terminate = self._handle_control(frame)
                try:
                    send_frame(sock, response, self.node.max_frame)
                except OSError:
                    return
                if terminate:
                    self.terminate()
                    return

    def _handle_control(self, frame: bytes) -> tuple[bytes, bool]:
        terminate = False
        try:
            req = xmlcanon.parse_document(frame)
            op = req.get("op", "")
            if op == "CREATE":
                port = self.cm.create(req.get("name", ""))
                resp = element("RESPONSE", {"status": "OK", "port": str(port)})
            elif op == "CONNECT":
                self.cm.connect(req.get("name", ""), req.get("host", ""),
                                int(req.get("port", "0")))
                resp = element("RESPONSE", {"status": "OK"})
            elif op == "DISCONNECT":
                self.cm.disconnect(req.get("name", ""))
                resp = element("RESPONSE", {"status": "OK"})
            elif op == "STATUS":
                children = [element("CHANNEL", {"name": n, "state": s})
                            for n, s in sorted(self.cm.states().items())]
                resp = element("RESPONSE", {"status": "OK"}, children=children)
            elif op == "READ_DEFAULT":
                timeout = float(req.get("timeout", "5"))
                msg = self.progenitor_endpoint.try_read(timeout)
                if msg is None:
                    resp = element("RESPONSE",
                                   {"status": "ERROR", "error": "Timeout"})
                else:
                    resp = element("RESPONSE", {"status": "OK"},
                                   text=base64.b64encode(msg).decode("ascii"))
            elif op == "WRITE_DEFAULT":
                payload = base64.b64decode((req.text or "").strip() or b"")
                self.progenitor_endpoint.write(payload)
                resp = element("RESPONSE", {"status": "OK"})
            elif op == "TERMINATE":
                resp = element("RESPONSE", {"status": "OK"})
                terminate = True
            else:
                resp = element("RESPONSE",
                               {"status": "ERROR", "error": "UnknownOp"},
                               text=op)
        except CingalError as exc:
            resp = element("RESPONSE", {"status": "ERROR", "error": exc.code},
                           text=str(exc))
        except (ValueError, OSError) as exc:
            resp = element("RESPONSE", {"status": "ERROR", "error": "Error"},
                           text=str(exc))
        response = xmlcanon.canonical_bytes(resp)
        self.cm.control_log.append(
            (frame.decode("utf-8", "replace"),
             response.decode("utf-8", "replace")))
        return response, terminate

    # --- resource port ---------------------------------------------------------

    def _accept_resource(self) -> None:
        # Data connections may also arrive here; the first frame names the
        # LISTENING channel the peer wants to attach to.
        while True:
            try:
                sock, _ = self._resource_listener.accept()
            except OSError:
                return
            threading.Thread(target=self._serve_resource, args=(sock,),
                             daemon=True).start()

    def _serve_resource(self, sock: socket.socket) -> None:
        try:
            sock.settimeout(self.node.connect_timeout)
            frame = recv_frame(sock, self.node.max_frame)
        except (OSError, CingalError):
            sock.close()
            return
        if frame is None:
            sock.close()
            return
        name = frame.decode("utf-8", "replace")
        sock.settimeout(None)
        if not self.cm.attach_inbound(name, sock):
            sock.close()


def spawn_machine(node, b: Bundle) -> tuple[Machine, ChannelEndpoint]:
    """Create and start a machine for a bundle on a node.

    Returns the machine and the progenitor-facing default channel end.
    Entity authorization happens at the fire gate before this is called.
    """
    behavior = node.executors.resolve(b)
    machine = Machine(node, b, behavior)
    node.register_machine(machine)
    machine.start()
    return machine, machine.progenitor_endpoint


# --- built-in tools -----------------------------------------------------------

def _bundle_todolist(b: Bundle) -> ToDoList:
    return todolist_from_content(b.datum("ToDoList").content)


def _send_report(api: MachineApi, report: TaskReport) -> None:
    api.default.write(report_to_bytes(report))


def tool_install(b: Bundle, api: MachineApi) -> TaskReport:
    """Store each payload bundle named by an INSTALL task; report the keys."""
    results = []
    for task in _bundle_todolist(b).tasks:
        try:
            if task.type != "INSTALL":
                raise SchemaViolation(f"installer got a {task.type} task")
            payload_ref = task.datum_text("PayloadRef").strip()
            payload = nested_bundle(b.datum(payload_ref))
            key = api.store_put(payload)
            results.append(TaskResult(task.guid, STATUS_OK,
                                      ((payload_ref, str(key)),)))
        except CingalError as exc:
            results.append(TaskResult(task.guid, STATUS_FAILED,
                                      (("error", exc.code),)))
    report = TaskReport(tuple(results))
    _send_report(api, report)
    return report


def tool_run(b: Bundle, api: MachineApi) -> TaskReport:
    """Fire each stored bundle named by a RUN task; report its connector."""
    results = []
    for task in _bundle_todolist(b).tasks:
        try:
            if task.type != "RUN":
                raise SchemaViolation(f"runner got a {task.type} task")
            key = Guid(task.datum_text("StoreGuid").strip())
            stored = api.store_get(key)
            machine = api.spawn(stored)
            results.append(TaskResult(task.guid, STATUS_OK,
                                      (("Connector", str(machine.connector)),)))
        except CingalError as exc:
            results.append(TaskResult(task.guid, STATUS_FAILED,
                                      (("error", exc.code),)))
    report = TaskReport(tuple(results))
    _send_report(api, report)
    return report


def _task_connector(task: Task, datum_id: str) -> Connector:
    el = xmlcanon.parse_fragment(task.datum_text(datum_id))
    return Connector.from_element(el)


def _wire_as_initiator(b: Bundle, api: MachineApi, task: Task) -> TaskResult:
    primary = _task_connector(task, "PrimaryConnector")
    primary_name = task.datum_text("PrimaryNamedChannel").strip()
    secondary_fire = b.datum("SecondaryFireAddress").content.strip()

    resp = remote.control_request(primary.host, primary.machine_port,
                                  "CREATE", {"name": primary_name})
    port = int(resp.get("port", "0"))

    # The offspring carries the same task plus the listening port. Its code
    # and authentication are copied verbatim from this wirer: the signature
    # covers only the CODE section, which is identical.
    offspring = Bundle(
        auth=b.auth,
        code=b.code,
        data=(Datum("ToDoList", todolist_content(ToDoList((task,)))),
              Datum("ListeningPort", str(port))),
    )
    handle = api.fire_remote(secondary_fire, serialize_bundle(offspring))
    try:
        offspring_report = report_from_bytes(handle.read(timeout=30.0))
    finally:
        handle.close()
    if not offspring_report.all_ok:
        error = "ConnectFailed"
        for result in offspring_report.results:
            for k, v in result.info:
                if k == "error":
                    error = v
        return TaskResult(task.guid, STATUS_FAILED, (("error", error),))
    return TaskResult(task.guid, STATUS_OK,
                      (("ListeningPort", str(port)),
                       ("PrimaryNamedChannel", primary_name)))


def _wire_as_offspring(b: Bundle, api: MachineApi, task: Task) -> TaskResult:
    primary = _task_connector(task, "PrimaryConnector")
    secondary = _task_connector(task, "SecondaryConnector")
    secondary_name = task.datum_text("SecondaryNamedChannel").strip()
    port = int(b.datum("ListeningPort").content.strip())
    remote.control_request(secondary.host, secondary.machine_port, "CONNECT",
                           {"name": secondary_name, "host": primary.host,
                            "port": str(port)})
    return TaskResult(task.guid, STATUS_OK,
                      (("SecondaryNamedChannel", secondary_name),
                       ("Port", str(port))))


def tool_wire(b: Bundle, api: MachineApi) -> TaskReport:
    """Connect one named-channel pair per WIRE task.

    Without a ListeningPort datum this wirer initiates: it asks the primary
    machine to listen, then fires an offspring at the secondary node which
    connects back to that port. With a ListeningPort datum it is the
    offspring and performs the connect.
    """
    offspring_mode = b.has_datum("ListeningPort")
    results = []
    for task in _bundle_todolist(b).tasks:
        try:
            if task.type != "WIRE":
                raise SchemaViolation(f"wirer got a {task.type} task")
            if offspring_mode:
                results.append(_wire_as_offspring(b, api, task))
            else:
                results.append(_wire_as_initiator(b, api, task))
        except CingalError as exc:
            results.append(TaskResult(task.guid, STATUS_FAILED,
                                      (("error", exc.code),)))
    report = TaskReport(tuple(results))
    _send_report(api, report)
    return report


def tool_entity(b: Bundle, api: MachineApi) -> TaskReport:
    """Add or remove a VER entity; the admin counterpart of the deploy tools."""
    from .security import EntityRecord, parse_rights  # local to avoid cycle noise

    action = b.datum("Action").content.strip().upper()
    entity = b.datum("EntityId").content.strip()
    try:
        if action == "ADD":
            certificate = b.datum("Certificate").content.strip() + "\n"
            rights = parse_rights(b.datum("Rights").content.strip())
            api.ver_add(EntityRecord(entity, certificate, rights))
        elif action == "REMOVE":
            api.ver_remove(entity)
        else:
            raise SchemaViolation(f"unknown action {action!r}")
        report = TaskReport((TaskResult(action.lower(), STATUS_OK,
                                        (("EntityId", entity),)),))
    except CingalError as exc:
        report = TaskReport((TaskResult(action.lower(), STATUS_FAILED,
                                        (("error", exc.code),)),))
    _send_report(api, report)
    return report


# --- demo components -----------------------------------------------------------

def _configured_channel(b: Bundle) -> str:
    return b.datum("ChannelName").content.strip() if b.has_datum(
        "ChannelName") else "Out"


def demo_echo(b: Bundle, api: MachineApi) -> None:
    """Echo every default-channel message back to the progenitor."""
    while True:
        api.default.write(api.default.read())


def demo_source(b: Bundle, api: MachineApi) -> None:
    """Forward default-channel messages onto the configured named channel."""
    out = api.channel(_configured_channel(b))
    while True:
        out.write(api.default.read())


def demo_sink(b: Bundle, api: MachineApi) -> None:
    """Forward named-channel messages onto the default channel."""
    source = api.channel(_configured_channel(b))
    while True:
        api.default.write(source.read())


def default_registry() -> ExecutorRegistry:
    registry = ExecutorRegistry()
    registry.register(ENTRY_INSTALLER, tool_install)
    registry.register(ENTRY_RUNNER, tool_run)
    registry.register(ENTRY_WIRER, tool_wire)
    registry.register(ENTRY_ENTITY_MANAGER, tool_entity)
    registry.register("demo.Echo", demo_echo)
    registry.register("demo.Source", demo_source)
    registry.register("demo.Sink", demo_sink)
    return registry
