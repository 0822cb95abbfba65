"""Structural checker for the common JUnit result schema.

No XSD validator is available offline, so this encodes the rules of the
widely used Surefire/Jenkins ``junit-4`` schema that matter here: element
nesting, required attributes, numeric attribute types, and agreement of the
suite's count attributes with its test cases.
"""

from __future__ import annotations

from xml.etree import ElementTree as ET

SUITE_ATTRS_REQUIRED = ("name", "tests")
SUITE_CHILDREN = {"properties", "testcase", "system-out", "system-err"}
CASE_CHILDREN = {"skipped", "error", "failure", "system-out", "system-err"}
INT_ATTRS = ("tests", "failures", "errors", "skipped")


def validate_junit(data: bytes) -> list[str]:
    """Return a list of problems; empty means valid."""
    problems: list[str] = []
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        return [f"not well-formed: {exc}"]
    suites = [root] if root.tag == "testsuite" else list(root) if root.tag == "testsuites" else []
    if not suites:
        return [f"unexpected root element <{root.tag}>"]
    for suite in suites:
        if suite.tag != "testsuite":
            problems.append(f"<{suite.tag}> inside <testsuites>")
            continue
        for a in SUITE_ATTRS_REQUIRED:
            if a not in suite.attrib:
                problems.append(f"testsuite missing @{a}")
        for a in INT_ATTRS:
            v = suite.get(a)
            if v is not None and not (v.isdigit()):
                problems.append(f"testsuite @{a}={v!r} is not a non-negative integer")
        t = suite.get("time")
        if t is not None:
            try:
                float(t)
            except ValueError:
                problems.append(f"testsuite @time={t!r} is not a decimal")
        counts = {"failures": 0, "errors": 0, "skipped": 0}
        cases = 0
        for child in suite:
            if child.tag not in SUITE_CHILDREN:
                problems.append(f"unexpected <{child.tag}> in testsuite")
            if child.tag == "properties":
                for p in child:
                    if p.tag != "property" or "name" not in p.attrib or "value" not in p.attrib:
                        problems.append("properties must hold <property name value>")
            if child.tag != "testcase":
                continue
            cases += 1
            if "name" not in child.attrib:
                problems.append("testcase missing @name")
            outcome_tags = [c.tag for c in child if c.tag in ("skipped", "error", "failure")]
            if len(outcome_tags) > 1:
                problems.append(f"testcase {child.get('name')} has several outcomes {outcome_tags}")
            for c in child:
                if c.tag not in CASE_CHILDREN:
                    problems.append(f"unexpected <{c.tag}> in testcase")
            for tag, key in (("failure", "failures"), ("error", "errors"), ("skipped", "skipped")):
                counts[key] += tag in outcome_tags
        if suite.get("tests", "").isdigit() and int(suite.get("tests")) != cases:
            problems.append(f"@tests={suite.get('tests')} but {cases} testcase elements")
        for key, n in counts.items():
            declared = suite.get(key, "0")
            if declared.isdigit() and int(declared) != n:
                problems.append(f"@{key}={declared} but {n} such testcases")
    return problems
