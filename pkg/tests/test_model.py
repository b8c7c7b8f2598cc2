import numpy as np
import pytest

from decaps import tensor as T
from decaps.config import ModelConfig, shape_chain
from decaps.loss import spread_loss
from decaps.model import build, route_local
from decaps.routing import idr
from decaps.tensor import NonFiniteError, ShapeError, Tensor

from conftest import rel_error, tiny_config


class TestShapeChain:
    def test_full_scale(self):
        chain = dict(shape_chain(ModelConfig()))
        assert chain["stage3"] == (1024, 28, 28)
        assert chain["projection"] == (512, 28, 28)
        assert chain["primary"] == (32, 28, 28, 16)
        assert chain["convcaps1"] == (32, 26, 26, 16)
        assert chain["convcaps2"] == (32, 24, 24, 16)
        assert chain["classcaps"] == (2, 16)
        assert chain["ham"] == (32, 2, 24, 24)

    def test_desk_scale(self):
        chain = dict(shape_chain(ModelConfig.desk()))
        assert chain["stage3"] == (64, 6, 6)
        assert chain["convcaps2"] == (8, 2, 2, 16)
        assert chain["ham"] == (8, 2, 2, 2)

    def test_too_small_input_names_the_chain(self):
        with pytest.raises(ShapeError, match="convcaps2.*shape chain: input"):
            shape_chain(ModelConfig.desk(input_size=64))

    @pytest.mark.parametrize("kw", [dict(pose_dim=12), dict(routing="em"), dict(classes=1),
                                    dict(backbone_blocks=0), dict(backbone_out_channels=2)])
    def test_invalid_configs(self, kw):
        with pytest.raises(ShapeError):
            build(ModelConfig.desk(**kw))

    def test_forward_matches_chain(self, rng):
        cfg = tiny_config()
        out = build(cfg)(rng.uniform(size=(2, 24, 24)))
        chain = dict(shape_chain(cfg))
        assert out.poses.shape == (2,) + chain["classcaps"]
        assert out.ham.shape == (2,) + chain["ham"]
        assert out.activations.shape == (2, 2)
        assert np.all((out.activations.data >= 0) & (out.activations.data < 1))

    def test_desk_forward(self, rng):
        out = build(ModelConfig.desk())(rng.uniform(size=(2, 1, 96, 96)))
        assert out.ham.shape == (2, 8, 2, 2, 2)

    def test_wrong_image_size(self):
        with pytest.raises(ShapeError):
            build(tiny_config())(np.zeros((1, 32, 32)))


class TestBehaviour:
    def test_build_is_deterministic(self):
        a, b = build(tiny_config()).state_arrays(), build(tiny_config()).state_arrays()
        assert a.keys() == b.keys()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        c = build(tiny_config(seed=4)).state_arrays()
        assert not all(np.array_equal(a[k], c[k]) for k in a)

    def test_eval_mode_batch_independence(self, rng):
        model = build(tiny_config())
        model.eval()
        x = rng.uniform(size=(3, 24, 24))
        with T.no_grad():
            full = model(x).poses.data
            for n in range(3):
                np.testing.assert_allclose(model(x[n:n + 1]).poses.data[0], full[n], atol=1e-12)

    def test_local_routing_matches_per_location_idr(self, rng):
        cfg = tiny_config()
        votes = rng.normal(size=(1, 3, 2, 2, 2, 4))  # [N, heads, parents, h, w, d]
        got = route_local(Tensor(votes), cfg).data   # [N, parents, h, w, d]
        for x in range(2):
            for y in range(2):
                # at one location the input heads form a one-head grid of children
                v = votes[0, :, :, x, y].transpose(1, 0, 2)[None, :, :, None, :]
                want = idr(Tensor(v), cfg.routing_iters).poses.data
                np.testing.assert_allclose(got[0, :, x, y], want, atol=1e-12)

    def test_nonfinite_reports_layer(self, rng):
        model = build(tiny_config())
        model.stem.weight.data[0, 0, 0, 0] = np.inf
        with pytest.raises(NonFiniteError, match="layer stem"), np.errstate(invalid="ignore"):
            model(rng.uniform(size=(2, 24, 24)))

    def test_baseline_routing_model_has_ham(self, rng):
        out = build(tiny_config(routing="baseline"))(rng.uniform(size=(2, 24, 24)))
        assert out.ham.shape == (2, 2, 2, 2, 2)
        assert np.all(out.ham.data >= 0)


def _objective(model, x, y, w):
    out = model(x)
    return spread_loss(out.activations, y, 0.9) + (out.ham * w).sum()


def end_to_end_error(seed):
    """Worst relative error of backprop through the whole tiny network.

    Routing is differentiated end to end here; the stop-gradient default holds the
    coefficients constant, which finite differences cannot see.
    """
    r = np.random.default_rng(seed)
    model = build(tiny_config(seed=seed, routing_stop_gradient=False))
    x = r.uniform(size=(2, 24, 24))
    y = np.array([0, 1])
    w = r.normal(size=(2, 2, 2, 2, 2)) * 0.1

    def value():
        return _objective(model, x, y, w).item()

    model.zero_grad()
    _objective(model, x, y, w).backward()
    eps = 1e-6
    worst = 0.0
    for name, p in model.named_parameters():
        flat = p.data.reshape(-1)
        idx = r.choice(flat.size, size=min(flat.size, 10), replace=False)
        num = np.empty(len(idx))
        for k, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            hi = value()
            flat[i] = old - eps
            lo = value()
            flat[i] = old
            num[k] = (hi - lo) / (2 * eps)
        ana = p.grad.reshape(-1)[idx]
        worst = max(worst, rel_error(ana, num))
    return worst


@pytest.mark.parametrize("seed", range(5))
def test_end_to_end_gradient(seed):
    assert end_to_end_error(seed) < 1e-3
