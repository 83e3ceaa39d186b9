import numpy as np

from refedit import ops
from refedit.engine import Tensor, accumulate, record
from refedit.gradcheck import check_gradients, run_suite, suite_passed


def test_fresh_build_passes_everything():
    results = run_suite(0)
    assert suite_passed(results)
    assert len(results) >= 20


def test_report_carries_max_rel_err_per_op():
    results = run_suite(1)
    names = [r.name for r in results]
    assert len(set(names)) == len(names)
    for r in results:
        assert np.isfinite(r.max_rel_err) and r.max_rel_err >= 0
        assert "max_rel" in r.line()


def test_corrupted_adjoint_is_flagged(rng):
    # custom op with a deliberately wrong backward rule: forward is 2x,
    # recorded adjoint claims 3x
    def bad_double(x):
        out = Tensor(x.data * 2.0, requires_grad=True)

        def apply():
            if out.grad is not None:
                accumulate(x, out.grad * 3.0)

        record("bad_double", apply, out)
        return out

    x = Tensor(rng.uniform(-1, 1, (4,)), requires_grad=True)
    result = check_gradients("bad_double", lambda: ops.sum(bad_double(x)), [x])
    assert not result.passed
    assert result.max_rel_err > 0.1
