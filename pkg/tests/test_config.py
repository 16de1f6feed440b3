import pytest

from bros.config import ConfigError, ProblemSpec, apply_override, build_problem, load_config, parse_config
from bros.problems import HyperCleaning, QuadraticBilevel

BASE = {"problem": {"kind": "quadratic", "m": 4, "n": 2, "d_x": 2}, "solver": {"K": 10, "ranks": [2]}}


def tree(**changes):
    import copy

    t = copy.deepcopy(BASE)
    t.update(changes)
    return t


def test_defaults_and_resolution():
    rc = parse_config(tree())
    assert rc.method == "bros" and rc.trials == 1000
    assert rc.problem.resolved()["conditioning"] == 4.0
    assert rc.solver.ranks == (2,) and rc.solver.K == 10
    assert isinstance(build_problem(rc.problem), QuadraticBilevel)


@pytest.mark.parametrize(
    "bad",
    [
        tree(extra=1),
        tree(problem={"kind": "quadratic", "mm": 3}),
        tree(problem={"kind": "cubic"}),
        tree(solver={"K": 3, "beta": 0.1}),
        tree(solver={"alpha": 0.1}),
        tree(solver={"K": 3, "ranks": [1]}),
        tree(method="sgd"),
        tree(sweep={"seeds": [1], "jobs": 2}),
        tree(trials=0),
        [1, 2],
    ],
)
def test_rejections(bad):
    with pytest.raises(ConfigError):
        parse_config(bad)


def test_overrides():
    t = tree()
    apply_override(t, "solver.K=2000")
    apply_override(t, "solver.ranks=[3]")
    apply_override(t, "problem.structure=general")
    apply_override(t, "solver.alpha=auto")
    rc = parse_config(t)
    assert rc.solver.K == 2000 and rc.solver.ranks == (3,) and rc.solver.alpha == "auto"
    assert rc.problem.params["structure"] == "general"
    with pytest.raises(ConfigError):
        apply_override(t, "solver.K")
    with pytest.raises(ConfigError):
        apply_override(tree(method="bros"), "method.name=x")


def test_content_hash():
    a, b = parse_config(tree()), parse_config(tree())
    assert a.content_hash() == b.content_hash() and len(a.content_hash()) == 64
    assert parse_config(tree(method="masoba")).content_hash() != a.content_hash()
    # explicit defaults hash like implicit ones
    t = tree()
    t["problem"]["conditioning"] = 4.0
    assert parse_config(t).content_hash() == a.content_hash()


def test_load_config(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("problem:\n  kind: counterexample\nsolver:\n  K: 5\n  alpha: 0.1\nmethod: masoba\n")
    rc = load_config(path, ["solver.K=7"])
    assert rc.solver.K == 7 and rc.method == "masoba"
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("problem: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")


def test_build_problem_kinds(tmp_path):
    assert build_problem(ProblemSpec("counterexample")).d_x == 1
    bq = build_problem(ProblemSpec("block-quadratic", {"layers": [[3, 2], [2, 2]]}))
    assert bq.shape.layers == ((3, 2), (2, 2))
    hc = build_problem(ProblemSpec("hypercleaning", {"n_train": 30, "n_val": 20, "d_feat": 4, "classes": 3}))
    assert isinstance(hc, HyperCleaning) and hc.d_x == 30
    with pytest.raises(ConfigError):
        build_problem(ProblemSpec("quadratic", {"conditioning": 0.5}))
    with pytest.raises(ConfigError):
        build_problem(ProblemSpec("hypercleaning", {"train_csv": str(tmp_path / "a.csv")}))
