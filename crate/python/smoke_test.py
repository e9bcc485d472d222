"""Smoke test for the `fedocvqa` Python module.

Build with `cargo build --release -p fedocvqa-py`, then either put the module on
`PYTHONPATH` or pass the built library path as the first argument.
"""

import importlib.util
import json
import math
import sys
import tempfile


def load(path=None):
    if path is None:
        import fedocvqa

        return fedocvqa
    spec = importlib.util.spec_from_file_location("fedocvqa", path)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    fv = load(sys.argv[1] if len(sys.argv) > 1 else None)

    assert fv.levenshtein("kitten", "sitting") == 3
    assert math.isclose(fv.anls("building", ["buildings"]), 8 / 9)
    report = fv.two_step_average(
        [("A", "x", ["x"]), ("A", "x", ["y"]), ("B", "yes", ["yes"]), ("B", "no", ["no"])]
    )
    assert report["final_score"] == 0.75, report

    assert fv.clients_per_round(10, 0.35) == 4
    picked = fv.sample_clients(10, 0.35, 0, 7)
    assert picked == sorted(picked) and len(set(picked)) == 4
    assert fv.scenario_allocation(30) == [2, 13, 15]
    plan = fv.partition_plan(10, divisor=100)
    assert len(plan) == 10

    tokens = ["invoice", "total", "42"]
    boxes = [[0.1, 0.1, 0.2, 0.2], [0.3, 0.1, 0.4, 0.2], [0.5, 0.1, 0.6, 0.2]]
    for objective in ("tm", "lm", "tlm"):
        inp, tgt, inp_boxes = fv.fsp_pair(tokens, boxes, objective, seed=1, key="doc")
        back, back_boxes = fv.fsp_reconstruct(inp, tgt, inp_boxes, objective)
        assert back == tokens, (objective, back)
        for a, b in zip(back_boxes, boxes):
            assert all(abs(x - y) <= 1 / 500 for x, y in zip(a, b))

    state = fv.ServerState([0.0, 0.0])
    state.step("fedadam", [1.0, -1.0])
    assert state.theta[0] < 0 < state.theta[1]

    config = fv.RunConfig("k3", seed=0)
    config.set_phase("pretrain", rounds=1)
    config.set_phase("finetune", fraction=0.7, rounds=2)
    out = config.run()
    assert out["rounds_csv"].startswith("round,phase,")
    assert math.isfinite(out["summary"]["final_loss"])
    again = fv.RunConfig.from_json(config.to_json()).run()
    assert again == out

    with tempfile.TemporaryDirectory() as tmp:
        run_dir = config.run_to_dir(tmp)
        with open(f"{run_dir}/summary.json") as f:
            assert json.load(f)["config_key"] == config.config_key
        rows = fv.compare_runs([run_dir], "final_loss")["rows"]
        assert rows[0]["rank"] == 1

    try:
        fv.RunConfig("k7")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown scenario accepted")

    print("smoke test ok")


if __name__ == "__main__":
    main()
