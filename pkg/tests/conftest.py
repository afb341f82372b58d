import os

from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

TABLE4_TRACE = """\
mov esp, esi
pop ebx
pop edi
pop esi
pop ebp
ret 0x10
mov byte ptr [ebp-0x19], al
mov dword ptr [ebp-0x4], 0xfffffffe
mov dword ptr [ebp-0x24], 0x0
call 0x775ade2d
mov eax, dword ptr fs:[0x30]
mov eax, dword ptr [eax+0x50]
test eax, eax
jnz 0x775a3d2e
ret
"""

import pytest  # noqa: E402

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.when == "call" or rep.failed:
        status = "PASS" if rep.passed else "FAIL"
        if number not in _criteria or status == "FAIL":
            _criteria[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status, detail = _criteria[number]
        line = f"criterion {number}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
