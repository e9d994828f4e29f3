import pytest

_KEY = pytest.StashKey[dict]()


class AcceptanceLog:
    def __init__(self, store: dict):
        self.store = store

    def record(self, number: int, ok: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}: {detail}"
        self.store[number] = line
        print(line)
        return ok


def pytest_configure(config):
    config.stash[_KEY] = {}


@pytest.fixture(scope="session")
def acceptance(request) -> AcceptanceLog:
    return AcceptanceLog(request.config.stash[_KEY])


def pytest_runtest_makereport(item, call):
    number = getattr(item.function, "criterion", None)
    if number is None or call.excinfo is None or call.excinfo.errisinstance(pytest.skip.Exception):
        return
    store = item.config.stash[_KEY]
    if number not in store:
        store[number] = f"ACCEPTANCE {number:>2} FAIL: {call.excinfo.typename}: {call.excinfo.value}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_KEY, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        terminalreporter.write_line(store[number])
