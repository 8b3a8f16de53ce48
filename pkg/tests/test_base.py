import pytest

from services.base import BaseService, env_threads, parse_float_list, parse_id_list
from services.exceptions import NumericalError, ValidationError


def test_env_threads(monkeypatch):
    monkeypatch.delenv("LSE_THREADS", raising=False)
    assert env_threads() == 1
    monkeypatch.setenv("LSE_THREADS", "4")
    assert env_threads() == 4
    assert BaseService().threads == 4
    monkeypatch.setenv("LSE_THREADS", "zero")
    with pytest.raises(ValidationError):
        env_threads()


def test_run_wraps_errors():
    service = BaseService(threads=1)

    def fail():
        raise NumericalError("ridge system is numerically singular", contract="ridge-system",
                             diagnostics={"condition_estimate": 1e17})
    result = service._run("training", fail)
    assert result == {"status": "error", "kind": "numerical", "message": "ridge system is numerically singular",
                      "contract": "ridge-system", "diagnostics": {"condition_estimate": 1e17}}
    assert service._run("reading", lambda: {"rows": 2}) == {"status": "success", "rows": 2}


def test_list_parsing():
    assert parse_id_list(" 3, 1 ,2") == [3, 1, 2]
    assert parse_id_list("") == []
    with pytest.raises(ValidationError):
        parse_id_list("1, -2")
    assert parse_float_list("0.1,0.5") == [0.1, 0.5]
    with pytest.raises(ValidationError):
        parse_float_list("0.1,x")
