import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cingal.bundle import Datum, parse_bundle
from cingal.documents import (
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
from cingal.errors import SchemaViolation
from conftest import SAMPLES


class TestToDoList:
    def test_runner_sample(self):
        b = parse_bundle((SAMPLES / "runner_bundle.xml").read_bytes())
        todo = todolist_from_content(b.datum("ToDoList").content)
        assert len(todo.tasks) == 1
        task = todo.tasks[0]
        assert task.type == "RUN"
        assert task.datum_text("StoreGuid").strip() != ""

    def test_wirer_sample_datums(self):
        b = parse_bundle((SAMPLES / "wirer_bundle.xml").read_bytes())
        todo = todolist_from_content(b.datum("ToDoList").content)
        task = todo.tasks[0]
        assert task.type == "WIRE"
        ids = [d.id for d in task.datums]
        assert ids == ["PrimaryConnector", "SecondaryConnector",
                       "PrimaryNamedChannel", "SecondaryNamedChannel"]

    def test_round_trip(self):
        todo = ToDoList((Task("t-1", "INSTALL",
                              (Datum("Payload", "urn:cingal:abcd"),)),
                         Task("t-2", "RUN", ())))
        assert todolist_from_content(todolist_content(todo)) == todo

    def test_unknown_type(self):
        content = '<TODOLIST><TASK guid="g" type="DANCE"/></TODOLIST>'
        with pytest.raises(SchemaViolation):
            todolist_from_content(content)

    def test_duplicate_guid(self):
        content = ('<TODOLIST><TASK guid="g" type="RUN"/>'
                   '<TASK guid="g" type="RUN"/></TODOLIST>')
        with pytest.raises(SchemaViolation):
            todolist_from_content(content)

    def test_missing_guid(self):
        with pytest.raises(SchemaViolation):
            todolist_from_content('<TODOLIST><TASK type="RUN"/></TODOLIST>')

    def test_wrong_root(self):
        with pytest.raises(SchemaViolation):
            todolist_from_content("<TASKS/>")

    def test_missing_task_datum(self):
        task = Task("g", "RUN", ())
        with pytest.raises(SchemaViolation):
            task.datum_text("StoreGuid")


class TestTaskReport:
    def test_round_trip(self):
        report = TaskReport((
            TaskResult("t-1", STATUS_OK, (("StoreGuid", "urn:cingal:ab"),)),
            TaskResult("t-2", STATUS_FAILED, (("error", "boom"),))))
        assert report_from_bytes(report_to_bytes(report)) == report

    def test_all_ok(self):
        ok = TaskReport((TaskResult("a", STATUS_OK),))
        mixed = TaskReport((TaskResult("a", STATUS_OK),
                            TaskResult("b", STATUS_FAILED)))
        assert ok.all_ok
        assert not mixed.all_ok
        assert TaskReport(()).all_ok

    def test_info_value(self):
        r = TaskResult("a", STATUS_OK, (("k", "v"),))
        assert r.info_value("k") == "v"
        with pytest.raises(KeyError):
            r.info_value("missing")

    def test_wrong_root(self):
        with pytest.raises(SchemaViolation):
            report_from_bytes(b"<REPORT/>")


_ident = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789-",
                 min_size=1, max_size=10)


@given(st.lists(st.tuples(_ident,
                          st.sampled_from([STATUS_OK, STATUS_FAILED]),
                          st.lists(st.tuples(_ident, _ident), max_size=3)),
                max_size=5))
@settings(max_examples=100)
def test_report_round_trip_property(entries):
    report = TaskReport(tuple(
        TaskResult(guid, status, tuple(info))
        for guid, status, info in entries))
    assert report_from_bytes(report_to_bytes(report)) == report
