from __future__ import annotations

import pytest

from consult_rl.dataset import ConsultationCase, GoldTurn, TOPIC_QUESTIONS

from mock_chat import ScriptedChatServer

# criterion name -> (passed, detail), filled by tests marked ``acceptance``.
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): one acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call":
        return
    detail = dict(item.user_properties).get("detail", "")
    if report.failed:
        detail = (detail + " " if detail else "") + str(call.excinfo.value).splitlines()[0][:160]
    ACCEPTANCE[marker.args[0]] = (report.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def five_fact_case() -> ConsultationCase:
    """Four answerable topics plus a one-clause self-report: five profile facts."""
    return ConsultationCase(
        case_id="fixture-5",
        self_report="I feel very weak and breathless.",
        gold_turns=(
            GoldTurn(TOPIC_QUESTIONS["duration"], "About four days."),
            GoldTurn(TOPIC_QUESTIONS["fever"], "My temperature is 39 degrees."),
            GoldTurn(TOPIC_QUESTIONS["cough"], "I cough up green mucus."),
            GoldTurn(TOPIC_QUESTIONS["pain"], "It stabs on the right side of my chest."),
        ),
        gold_diagnosis="pneumonia",
        gold_recommendation="chest x-ray then antibiotics",
        disease_category="Infectious Diseases",
        split="test",
    )


@pytest.fixture
def three_turn_case() -> ConsultationCase:
    return ConsultationCase(
        case_id="fixture-3",
        self_report="I feel tired and run down.",
        gold_turns=(
            GoldTurn(TOPIC_QUESTIONS["duration"], "About two days."),
            GoldTurn(TOPIC_QUESTIONS["fever"], "I had a low fever."),
            GoldTurn(TOPIC_QUESTIONS["cough"], "My cough keeps me awake."),
        ),
        gold_diagnosis="bronchitis",
        gold_recommendation="cough suppressants and warm fluids",
        disease_category="Respiratory System Diseases",
        split="train",
    )


@pytest.fixture
def chat_server():
    servers = []

    def start(script=None, responder=None):
        srv = ScriptedChatServer(script=script, responder=responder)
        srv.start()
        servers.append(srv)
        return srv

    yield start
    for srv in servers:
        srv.stop()


@pytest.fixture
def api_key(monkeypatch):
    monkeypatch.setenv("CONSULT_RL_API_KEY", "test-key")
    return "test-key"
