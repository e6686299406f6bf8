"""Smoke test for the amber_py extension.

Build and install first:  pip install maturin && maturin develop -m crates/py/Cargo.toml
"""

import json
import math
import os
import tempfile

import amber_py as amber


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    assert amber.aggregate_votes([2, 1, 1, 0]) == [0.5, 0.25, 0.25, 0.0]
    assert close(amber.entropy_bits([0.25] * 4), 2.0)
    assert close(amber.js_divergence([1, 0], [0, 1]), 1.0)
    assert close(amber.bhattacharyya([0.5, 0.5], [1, 0]), math.sqrt(0.5))
    u = amber.expert_weights({"a": 0.10, "t": 0.30}, 4.0)
    assert close(u["a"], 0.6900, 1e-4) and close(u["t"], 0.3100, 1e-4)
    assert close(amber.relative_improvement("js", 0.216, 0.193), 10.648148148148149, 1e-6)

    try:
        amber.js_divergence([0.5, 0.6], [0.5, 0.5])
    except ValueError:
        pass
    else:
        raise AssertionError("invalid distribution accepted")

    m = amber.evaluate([[0.9, 0.1], [0.2, 0.8], [0.3, 0.7], [0.4, 0.6]], [[1, 0], [1, 0], [0, 1], [0, 1]])
    assert close(m["acc"], 0.75) and close(m["f1_macro"], 11 / 15)

    ds = amber.generate_synthetic(n_samples=150, seed=3)
    assert len(ds) == 150 and ds.classes == 4 and ds.folds == 5
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "ds.jsonl")
        ds.save(path)
        assert amber.Dataset.load(path).content_hash() == ds.content_hash()

    runs = amber.cross_validate(ds, objective="amber", seeds=[0], epochs=2, batch=32, hidden=8, fusion_dim=8)
    assert len(runs) == 5
    run = runs[0]
    assert set(run["test"]) == {"a", "t", "at"}
    h_a, h_t = ds.features()
    preds = run["model"].predict(h_a[:3], h_t[:3])
    assert all(close(sum(row), 1.0, 1e-12) for row in preds["at"])

    bins = amber.ambiguity_bins(preds["at"], ds.soft_labels()[:3], 4)
    assert sum(b["count"] for b in bins) == 3
    print(json.dumps({"runs": len(runs), "student_js": run["test"]["at"]["js"]}))
    print("smoke test passed")


if __name__ == "__main__":
    main()
