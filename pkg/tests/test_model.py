import numpy as np
import pytest

from mtlnorm import autograd as ag
from mtlnorm.autograd import Tensor
from mtlnorm.model import ArchSpec, BlockSpec, SpecError, build, forward_task, parameter_census, reference_arch
from mtlnorm.norm import NormState, norm_forward


def tiny_arch(outputs=(2, 1)):
    return ArchSpec(
        input_shape=(1, 6, 6),
        blocks=[BlockSpec("conv", 3, 3, 1, "relu", 2), BlockSpec("conv", 4, 3, 1, "gelu", 1)],
        head_widths=[[5, k] for k in outputs],
    )


def params_bytes(model):
    return [(n, p.data.tobytes()) for n, p in model.named_parameters()]


class TestBuild:
    def test_same_seed_bitwise(self):
        a = build(reference_arch(), "TSSigmaBN", 11)
        b = build(reference_arch(), "TSSigmaBN", 11)
        assert params_bytes(a) == params_bytes(b)
        c = build(reference_arch(), "TSSigmaBN", 12)
        assert params_bytes(a) != params_bytes(c)

    def test_zero_width(self):
        spec = tiny_arch()
        spec.blocks[1].width = 0
        with pytest.raises(SpecError):
            build(spec, "HPS")

    def test_unknown_mode(self):
        with pytest.raises(SpecError):
            build(tiny_arch(), "MoE")

    def test_spec_round_trip(self):
        spec = reference_arch()
        assert ArchSpec.from_dict(spec.to_dict()) == spec


class TestCensus:
    def test_sigma_vs_hps_gamma_excess(self):
        spec = reference_arch()
        F = 80
        ts = build(spec, "TSSigmaBN")
        hps = build(spec, "HPS")

        def gammas(m):
            return sum(p.data.size for n, p in m.named_parameters() if n.endswith("gamma"))

        assert gammas(ts) - gammas(hps) == 2 * F
        # hps carries a shared affine beta, so the total excess is F
        assert parameter_census(ts).total - parameter_census(hps).total == F
        # running buffers: one row per task
        assert sum(st.running_mean.shape[0] for _, st in ts.named_norm_states()) == 3 * 3

    def test_sigma_hps_excess_is_two_f(self):
        spec = reference_arch()
        spec.hps_variant = "SigmaBN"
        diff = parameter_census(build(spec, "TSSigmaBN")).total - parameter_census(build(spec, "HPS")).total
        assert diff == 2 * 80

    def test_stl_is_triple(self):
        single = parameter_census(build(reference_arch((2,)), "STL")).total
        assert parameter_census(build(reference_arch((2, 2, 2)), "STL")).total == 3 * single

    def test_hps_shared_independent_of_tasks(self):
        a = parameter_census(build(reference_arch((2,) * 40), "HPS"))
        b = parameter_census(build(reference_arch((2, 2)), "HPS"))
        assert a.shared_count == b.shared_count

    def test_adding_a_task(self):
        a = parameter_census(build(reference_arch((2, 2)), "TSSigmaBN"))
        b = parameter_census(build(reference_arch((2, 2, 1)), "TSSigmaBN"))
        head = 512 * 64 + 64 + 64 * 1 + 1
        assert b.total - a.total == 80 + head

    def test_norm_fraction_small(self):
        c = parameter_census(build(reference_arch(), "TSSigmaBN"))
        assert c.per_task_norm_count == 80
        assert c.per_task_norm_count / c.total < 0.01

    def test_frozen_reported_separately(self):
        m = build(tiny_arch(), "TSSigmaBN")
        before = parameter_census(m).total
        m.trunks[0].norms[0].load_pretrained(np.full(3, 0.6), np.ones(3))
        c = parameter_census(m)
        assert c.frozen_count == 3 * 2 and c.total == before


class TestForward:
    def test_symmetry(self):
        spec = tiny_arch((2, 2))
        m = build(spec, "TSSigmaBN", 0)
        m.heads[1] = m.heads[0]
        for _, st in m.named_norm_states():
            st.gamma.data[1] = st.gamma.data[0] = np.linspace(-1, 1, st.num_features)
        x = np.random.default_rng(0).normal(size=(4, 1, 6, 6))
        np.testing.assert_array_equal(forward_task(m, x, 0).data, forward_task(m, x, 1).data)

    def test_hps_differs_only_via_heads(self):
        m = build(tiny_arch((2, 2)), "HPS", 0)
        x = np.random.default_rng(1).normal(size=(4, 1, 6, 6))
        f0, f1 = m.features(x, 0).data, m.features(x, 1).data
        np.testing.assert_array_equal(f0, f1)
        m.heads[1] = m.heads[0]
        np.testing.assert_array_equal(forward_task(m, x, 0).data, forward_task(m, x, 1).data)

    @pytest.mark.parametrize("mode", ["STL", "HPS", "TSBN", "TSSigmaBN"])
    def test_eval_batch_invariance(self, mode):
        m = build(tiny_arch(), mode, 2)
        rng = np.random.default_rng(3)
        for t in range(2):
            forward_task(m, rng.normal(size=(8, 1, 6, 6)), t)
        x = rng.normal(size=(8, 1, 6, 6))
        for t in range(2):
            batch = forward_task(m, x, t, "eval").data
            single = np.concatenate([forward_task(m, x[i : i + 1], t, "eval").data for i in range(8)])
            np.testing.assert_allclose(batch, single, atol=1e-12, rtol=0)
            assert forward_task(m, x, t, "eval").data.tobytes() == batch.tobytes()

    def test_task_out_of_range(self):
        with pytest.raises(IndexError):
            forward_task(build(tiny_arch(), "TSSigmaBN"), np.zeros((2, 1, 6, 6)), 2)


def _task_loss(m, x, y, t):
    kind = "mse" if m.spec.head_widths[t][-1] == 1 else "cross_entropy"
    pred = forward_task(m, x, t, update_stats=False)
    if kind == "mse":
        return ag.loss(pred, y[t].reshape(-1, 1), kind)
    return ag.loss(pred, y[t], kind)


def _batch(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 1, 6, 6))
    return x, [rng.integers(0, 2, 6), rng.normal(size=6)]


def test_gradient_isolation():
    m = build(tiny_arch(), "TSSigmaBN", 4)
    x, y = _batch(4)
    m.zero_grad()
    ag.backward(_task_loss(m, x, y, 0))
    for _, st in m.named_norm_states():
        assert np.all(st.gamma.grad[1] == 0.0)
        assert np.any(st.gamma.grad[0] != 0.0)
    for w, b in m.heads[1]:
        assert w.grad is None or np.all(w.grad == 0.0)
        assert b.grad is None or np.all(b.grad == 0.0)


def test_weighted_trunk_gradient_is_linear():
    m = build(tiny_arch(), "TSSigmaBN", 5)
    x, y = _batch(5)
    weights = (0.7, 1.9)
    per_task = []
    for t in range(2):
        m.zero_grad()
        ag.backward(_task_loss(m, x, y, t))
        per_task.append([w.grad.copy() for w in m.trunk_weights()])
    m.zero_grad()
    total = ag.add(
        ag.mul(_task_loss(m, x, y, 0), Tensor(np.array(weights[0]))),
        ag.mul(_task_loss(m, x, y, 1), Tensor(np.array(weights[1]))),
    )
    ag.backward(total)
    for k, w in enumerate(m.trunk_weights()):
        expected = weights[0] * per_task[0][k] + weights[1] * per_task[1][k]
        np.testing.assert_allclose(w.grad, expected, atol=1e-10, rtol=0)


def test_composite_graph_grad_check():
    rng = np.random.default_rng(6)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    st = NormState("BN", 1, 3)
    st.gamma.data[:] = rng.normal(size=(1, 3))
    st.beta.data[:] = rng.normal(size=(1, 3))
    d = Tensor(rng.normal(size=(4, 3 * 4 * 4)))
    y = rng.integers(0, 4, 5)

    def f(x):
        h = norm_forward(ag.conv2d(x, w, padding=1), st, 0, update_stats=False)
        return ag.cross_entropy(ag.dense(ag.flatten(ag.relu(h)), d), y)

    assert ag.grad_check(f, rng.normal(size=(5, 2, 4, 4))) < 1e-5


@pytest.mark.parametrize("target", ["trunk0.block0.weight", "trunk0.norm0.gamma", "trunk0.norm1.gamma", "head1.layer0.weight"])
def test_full_model_grad_check(target):
    m = build(tiny_arch(), "TSSigmaBN", 7)
    rng = np.random.default_rng(7)
    for _, st in m.named_norm_states():
        st.gamma.data[:] = rng.normal(size=st.gamma.shape)
    x, y = _batch(7)
    params = dict(m.named_parameters())
    owner, attr = _locate(m, target)
    start = params[target].data.copy()

    def f(p):
        _assign(owner, attr, p)
        return ag.add(_task_loss(m, x, y, 0), _task_loss(m, x, y, 1))

    assert ag.grad_check(f, start) < 1e-4


def _locate(m, name):
    parts = name.split(".")
    if parts[0].startswith("trunk"):
        trunk = m.trunks[int(parts[0][5:])]
        i = int(parts[1][5:] if parts[1].startswith("block") else parts[1][4:])
        if parts[1].startswith("block"):
            return (trunk.weights, i), None
        return trunk.norms[i], parts[2]
    layers = m.heads[int(parts[0][4:])]
    j = int(parts[1][5:])
    return (layers, j), parts[2]


def _assign(owner, attr, value):
    if attr is None:
        seq, i = owner
        seq[i] = value
    elif isinstance(owner, NormState):
        setattr(owner, attr, value)
    else:
        layers, j = owner
        w, b = layers[j]
        layers[j] = (value, b) if attr == "weight" else (w, value)
