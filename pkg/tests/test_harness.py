import pytest

from cingal.bundle import serialize_bundle
from cingal.errors import AssertionFailed, ResourceExhausted
from cingal.harness import (
    DEPLOYER_ENTITY,
    harness_spawn,
    run_scenario,
)
from cingal.security import sign_bundle
from conftest import SCENARIOS, make_bundle

SCENARIO = (SCENARIOS / "server_cache.xml").read_bytes()


class TestSpawn:
    def test_requested_node_count(self):
        with harness_spawn(4) as topo:
            assert len(topo.nodes) == 4
            addresses = {h.address for h in topo.nodes}
            assert len(addresses) == 4

    def test_zero_nodes_rejected(self):
        with pytest.raises(ResourceExhausted):
            harness_spawn(0)

    def test_deployer_provisioned_everywhere(self):
        with harness_spawn(2) as topo:
            for handle in topo.nodes:
                record = handle.server.ver.lookup(DEPLOYER_ENTITY)
                assert record.entity == DEPLOYER_ENTITY

    def test_nodes_are_isolated(self):
        with harness_spawn(2) as topo:
            b = sign_bundle(make_bundle(), topo.deployer_key,
                            DEPLOYER_ENTITY)
            key = topo.node(0).server.store.put(b)
            assert key not in topo.node(1).server.store.keys()
            topo.node(0).server.sbinder.put("only-here", key)
            assert topo.node(1).server.sbinder.names() == []

    def test_stop_releases_everything(self, tmp_path):
        topo = harness_spawn(1, base_dir=tmp_path)
        address = topo.node(0).address
        topo.stop()
        from cingal.errors import ConnectFailed
        with pytest.raises(ConnectFailed):
            topo.node(0).status()
        # the data dir can be reused immediately
        harness_spawn(1, base_dir=tmp_path).stop()

    def test_subprocess_daemons(self, tmp_path):
        from cingal import remote
        with harness_spawn(2, base_dir=tmp_path,
                           subprocess_daemons=True) as topo:
            for handle in topo.nodes:
                assert handle.process is not None
                assert handle.status().tag == "STATUS"
            # deployer provisioning went over the wire; prove it took
            b = sign_bundle(make_bundle(), topo.deployer_key,
                            DEPLOYER_ENTITY)
            fire = remote.fire(topo.node(0).address, serialize_bundle(b))
            fire.write(b"echo")
            assert fire.read(timeout=5.0) == b"echo"
            fire.close()


class TestScenarios:
    def test_canonical_scenario_passes(self):
        with harness_spawn(2) as topo:
            report = run_scenario(topo, SCENARIO)
        ops = [step["op"] for step in report]
        assert ops == ["COMPONENT", "COMPONENT", "DEPLOY",
                       "ASSERT-CHANNEL", "ASSERT-CHANNEL",
                       "ASSERT-STATE", "ASSERT-STATE", "PROBE"]
        assert all(step["ok"] for step in report)

    def test_false_assertion_fails_with_step_index(self):
        script = SCENARIO.replace(
            b'state="wired"', b'state="installed"', 1)
        with harness_spawn(2) as topo:
            with pytest.raises(AssertionFailed) as excinfo:
                run_scenario(topo, script)
        assert excinfo.value.step == 5
        assert "installed" in str(excinfo.value)

    def test_unknown_step_rejected(self):
        with harness_spawn(1) as topo:
            with pytest.raises(AssertionFailed):
                run_scenario(topo, b"<SCENARIO><EXPLODE/></SCENARIO>")

    def test_deployment_is_deterministic(self):
        """Same scenario, fresh topologies: identical port-free records."""
        def run_once():
            with harness_spawn(2) as topo:
                engine = topo.engine()
                topo.write_component("server", "demo.Source",
                                     channel="DownstreamCache")
                topo.write_component("cache", "demo.Sink",
                                     channel="UpstreamServer")
                from cingal.engine import parse_ddd
                from cingal.harness import _substitute
                from cingal import xmlcanon
                root = xmlcanon.parse_document(SCENARIO)
                ddd_el = root.find("DEPLOY").find("DDD")
                ddd = parse_ddd(_substitute(xmlcanon.canonical(ddd_el),
                                            topo))
                record = engine.deploy(ddd)
                view = record.comparable()
                # store keys differ between runs (fresh signing keys
                # change the stored bytes): mask them
                view["deployments"] = {
                    n: (state, host) for n, (state, _key, host)
                    in view["deployments"].items()}
                return view

        assert run_once() == run_once()
