"""Smoke test for the `iort` Python extension.

Builds the module with cargo unless it is already importable, then exercises
the arm model, wire codec, pattern store and a simulated scenario.

    python3 python/smoke_test.py
"""

import importlib
import json
import os
import shutil
import subprocess
import sys
import tempfile
import uuid

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    try:
        return importlib.import_module("iort")
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-p", "iort-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    target = os.environ.get("CARGO_TARGET_DIR", os.path.join(ROOT, "target"))
    built = os.path.join(target, "release", "libiort.so")
    if sys.platform == "darwin":
        built = built[:-3] + ".dylib"
    out = tempfile.mkdtemp(prefix="iort-py-")
    shutil.copy(built, os.path.join(out, "iort.so"))
    sys.path.insert(0, out)
    return importlib.import_module("iort")


def close(a, b, tol=1e-6):
    return abs(a - b) <= tol


def command(cid, angles, gripper=0.0, arm="armA", op="op1", t=0):
    keys = ["base_deg", "shoulder_deg", "elbow_deg", "wrist_pitch_deg", "wrist_roll_deg"]
    body = dict(zip(keys, angles))
    body.update(id=str(cid), arm_id=arm, operator_id=op, gripper_mm=gripper, issued_at_ms=t)
    return json.dumps(body)


def main():
    iort = load_module()

    pose = iort.forward_kinematics([0, 0, 0, 0, 0])
    assert (pose["x_cm"], pose["y_cm"], pose["z_cm"]) == (0.0, 0.0, 21.0), pose
    pose = iort.forward_kinematics([30, 45, -30, 15, 0])
    assert close(pose["x_cm"], 8.170417) and close(pose["y_cm"], 4.717192), pose
    assert close(pose["z_cm"], 18.152567), pose

    assert iort.plan_motion([0] * 5, [0, 0, 0, 0, 60])["duration_us"] == 180_000
    assert iort.plan_motion([0] * 5, [0, 0, 0, 0, 90])["duration_us"] == 270_000

    assert close(iort.shoulder_torque([0, 60, 30, 0, 0], 0.0), 1.9744, 1e-4)
    profile = iort.ArmProfile()
    assert profile.reach_cm == 21.0 and profile.stall_torque_kgfcm == 20.0
    assert iort.is_liftable([0, 60, 30, 0, 0], 800.0)
    assert not iort.is_liftable([0, 60, 30, 0, 0], 1000.0)
    assert [v["field"] for v in profile.violations([61, 0, 0, 0, 0])] == ["base_deg"]
    assert iort.ArmProfile.from_toml(profile.to_toml()).name == profile.name

    cmd = command(uuid.UUID(int=1), [10, 20, 30, 0, 0], 5.0)
    line = iort.encode(json.dumps({"v": 1, "type": "command", "seq": 1, "body": json.loads(cmd)}))
    env = iort.decode(line)
    assert env["type"] == "command" and env["body"]["elbow_deg"] == 30.0
    assert iort.validate(command(uuid.UUID(int=2), [0, 0, 0, 0, 95])) != []
    try:
        iort.decode('{"v": 2}')
        raise AssertionError("version 2 accepted")
    except ValueError:
        pass

    store = iort.PatternStore()
    seq = [[10, 0, 0, 0, 0], [10, 20, 0, 0, 0], [10, 20, 30, 0, 0], [10, 20, 30, 15, 45]]
    n = 0
    for rep in range(3):
        for angles in seq:
            n += 1
            cid = str(uuid.UUID(int=n))
            assert store.observe(command(cid, angles, t=n * 100), n * 100) is None
            store.record_outcome(cid, "ok", n * 100)
        store.close("armA", "op1", n * 100 + 1)
    assert store.counts() == (3, 1)
    [pattern] = store.patterns("armA")
    assert pattern["use_count"] == 3
    prompt = None
    for angles in seq[:2]:
        n += 1
        prompt = store.observe(command(uuid.UUID(int=n), angles, t=n * 100), n * 100)
    assert prompt is not None and prompt["matched_prefix_len"] == 2
    assert len(store.answer_prompt("op1", prompt["pattern_id"], True)) == 2
    assert store.patterns("armA")[0]["use_count"] == 4
    again = iort.PatternStore.restore(store.snapshot())
    assert again.snapshot() == store.snapshot()

    script = [{"ctl": "agent", "arm": "armA"}]
    for _ in range(3):
        script += [{"ctl": "send", "arm": "armA", "operator": "op1", "angles": a} for a in seq]
        script.append({"ctl": "end", "arm": "armA", "operator": "op1"})
    script += [{"ctl": "send", "arm": "armA", "operator": "op1", "angles": a} for a in seq[:2]]
    script.append({"ctl": "expect", "operator": "op1", "type": "pattern_prompt", "count": 1})
    text = "\n".join(json.dumps(s) for s in script)
    first = iort.run_scenario(text, seed=5)
    assert first["passed"], first["failures"]
    assert first == iort.run_scenario(text, seed=5)

    print("iort python smoke test: ok")


if __name__ == "__main__":
    main()
