import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tiedlora import numkit as nk
from tiedlora.adapter import (
    MODES,
    ZERO_START_MODES,
    AdapterParams,
    ModelDims,
    TiedLoraConfig,
    TiedLoraMode,
    adapter_delta,
    adapter_forward,
    count_trainable,
    init_adapter,
    merge,
    named_trainable_slots,
    tied_grad_accumulate,
    trainable_slots,
    validate_params,
)
from tiedlora.errors import DimensionError, ValidationError

ALL_MODES = list(TiedLoraMode)


def cfg(mode, d=4, L=3, r=2, **kw):
    return TiedLoraConfig(mode=mode, r=r, dims=ModelDims(d, L), **kw)


def randomize(params, rng):
    """Give every stored component (trainable or not) non-trivial values."""
    for _, t in params.named_tensors():
        t.assign(rng.normal(size=t.shape))


def dense_delta(params, config, layer):
    u = params.u[layer].data if params.u is not None else np.ones(config.r)
    v = params.v[layer].data if params.v is not None else np.ones(3 * config.dims.d)
    return config.alpha / config.r * np.diag(v) @ params.B[layer].data @ np.diag(u) @ params.A[layer].data


class TestCountTrainable:
    def test_lora_7b(self):
        assert count_trainable(cfg("LORA", 4096, 32, 8)) == 4_194_304

    def test_tab_7b(self):
        lora = count_trainable(cfg("LORA", 4096, 32, 8))
        tab = count_trainable(cfg("TAB", 4096, 32, 8))
        assert tab == 131_072
        assert 100 * (1 - tab / lora) == pytest.approx(96.875, abs=1e-12)

    def test_tuv_7b(self):
        lora = count_trainable(cfg("LORA", 4096, 32, 8))
        tuv = count_trainable(cfg("TUV", 4096, 32, 8))
        assert tuv == 393_472
        assert round(100 * (1 - tuv / lora), 1) == 90.6

    def test_tabuv_2b(self):
        lora = count_trainable(cfg("LORA", 2048, 24, 8))
        tabuv = count_trainable(cfg("TABUV", 2048, 24, 8))
        assert (lora, tabuv) == (1_572_864, 213_184)
        assert round(100 * tabuv / lora, 1) == 13.6

    def test_smallest(self):
        assert count_trainable(cfg("TB", 1, 1, 1)) == 3

    @settings(max_examples=200, deadline=None)
    @given(d=st.integers(1, 12), L=st.integers(1, 5), r=st.integers(1, 6))
    def test_matches_stored_trainables(self, d, L, r):
        for mode in ALL_MODES:
            c = cfg(mode, d, L, r)
            slots = trainable_slots(init_adapter(c), c)
            assert sum(t.size for t in slots) == count_trainable(c)


class TestInit:
    def test_tab_zero_b(self):
        c = cfg("TAB")
        p = init_adapter(c)
        assert np.all(p.B[0].data == 0)
        for layer in range(3):
            np.testing.assert_array_equal(adapter_delta(p, c, layer), np.zeros((12, 4)))

    def test_tabuv_zero_v(self):
        c = cfg("TABUV")
        p = init_adapter(c)
        assert all(np.all(v.data == 0) for v in p.v)
        assert all(np.all(u.data == 1) for u in p.u)
        for layer in range(3):
            assert not adapter_delta(p, c, layer).any()

    @pytest.mark.parametrize("mode", ALL_MODES)
    def test_deterministic(self, mode):
        a, b = init_adapter(cfg(mode, init_seed=7)), init_adapter(cfg(mode, init_seed=7))
        assert [(n, t.data.tobytes()) for n, t in a.named_tensors()] == [
            (n, t.data.tobytes()) for n, t in b.named_tensors()
        ]

    @pytest.mark.parametrize("mode", ALL_MODES)
    def test_tied_single_instance(self, mode):
        c = cfg(mode)
        p = init_adapter(c)
        for comp in ("A", "B"):
            items = getattr(p, comp)
            ids = {id(t) for t in items}
            assert len(ids) == (1 if getattr(c.spec, f"tie_{comp}") else 3)

    @pytest.mark.parametrize("mode", ["TB", "TBU", "TA"])
    def test_nonzero_start_modes(self, mode):
        c = cfg(mode)
        assert adapter_delta(init_adapter(c), c, 0).any()
        forced = cfg(mode, zero_start_override=True)
        assert not adapter_delta(init_adapter(forced), forced, 0).any()

    def test_zero_start_set(self):
        assert set(ZERO_START_MODES) == {TiedLoraMode(m) for m in ("LORA", "TAB", "TABUV", "TAUV", "TUV")}

    def test_default_alpha_prefactor_one(self):
        assert cfg("TAB", r=8).scaling == 1.0

    def test_bad_config(self):
        with pytest.raises(ValidationError):
            cfg("TAB", r=0)
        with pytest.raises(ValidationError):
            cfg("NOPE")
        with pytest.raises(ValidationError):
            ModelDims(0, 1)


class TestDelta:
    def test_zero_v(self):
        c = cfg("TUV")
        p = init_adapter(c)
        assert adapter_delta(p, c, 1).shape == (12, 4)
        assert not adapter_delta(p, c, 1).any()

    def test_worked_example(self):
        c = cfg("TABUV", d=1, L=1, r=1)
        p = init_adapter(c)
        p.A[0].assign([[2.0]])
        p.B[0].assign([[1.0], [-1.0], [0.5]])
        p.u[0].assign([1.0])
        p.v[0].assign([1.0, 2.0, 0.0])
        np.testing.assert_array_equal(dense_delta(p, c, 0), [[2.0], [-4.0], [0.0]])
        np.testing.assert_array_equal(adapter_delta(p, c, 0), [[2.0], [-4.0], [0.0]])

    def test_unit_scaling_is_plain_product(self):
        c = cfg("TAB")
        p = init_adapter(c)
        randomize(p, np.random.default_rng(0))
        np.testing.assert_array_equal(adapter_delta(p, c, 2), p.B[0].data @ p.A[0].data)

    def test_alpha_scales(self):
        c = cfg("TAB", alpha=6.0)
        p = init_adapter(c)
        randomize(p, np.random.default_rng(0))
        np.testing.assert_allclose(adapter_delta(p, c, 0), 3.0 * p.B[0].data @ p.A[0].data, rtol=1e-14)

    def test_layer_out_of_range(self):
        c = cfg("TAB")
        with pytest.raises(DimensionError):
            adapter_delta(init_adapter(c), c, 3)

    @pytest.mark.parametrize("mode", ALL_MODES)
    def test_matches_dense_oracle(self, mode):
        c = cfg(mode, d=5, L=2, r=3, alpha=4.0)
        p = init_adapter(c)
        randomize(p, np.random.default_rng(1))
        for layer in range(2):
            np.testing.assert_allclose(adapter_delta(p, c, layer), dense_delta(p, c, layer), rtol=1e-12, atol=1e-14)


class TestForward:
    def test_fresh_tabuv_is_base(self):
        c = cfg("TABUV")
        p = init_adapter(c)
        rng = np.random.default_rng(2)
        W, x = nk.Tensor(rng.normal(size=(12, 4))), nk.Tensor(rng.normal(size=4))
        np.testing.assert_array_equal(adapter_forward(p, c, 0, W, x).data, W.data @ x.data)

    @pytest.mark.parametrize("mode", ALL_MODES)
    def test_matches_materialized_delta(self, mode):
        c = cfg(mode, d=6, L=2, r=3)
        p = init_adapter(c)
        rng = np.random.default_rng(3)
        randomize(p, rng)
        W, X = nk.Tensor(rng.normal(size=(18, 6))), nk.Tensor(rng.normal(size=(6, 5)))
        for layer in range(2):
            got = adapter_forward(p, c, layer, W, X).data
            want = (W.data + adapter_delta(p, c, layer)) @ X.data
            assert nk.relative_error(got, want) <= 1e-10

    def test_lora_reduces_to_two_matrix_form(self):
        c = cfg("LORA")
        p = init_adapter(c)
        rng = np.random.default_rng(4)
        randomize(p, rng)
        W, x = nk.Tensor(rng.normal(size=(12, 4))), nk.Tensor(rng.normal(size=4))
        want = W.data @ x.data + p.B[1].data @ (p.A[1].data @ x.data)
        assert nk.relative_error(adapter_forward(p, c, 1, W, x).data, want) <= 1e-12

    def test_shape_mismatch(self):
        c = cfg("TAB")
        with pytest.raises(DimensionError):
            adapter_forward(init_adapter(c), c, 0, nk.Tensor(np.zeros((12, 4))), nk.Tensor(np.zeros(5)))


class TestMerge:
    def test_zero_delta_bit_identical(self):
        c = cfg("TAB")
        base = [np.random.default_rng(i).normal(size=(12, 4)) for i in range(3)]
        merged = merge(init_adapter(c), c, base)
        for m, b in zip(merged, base):
            assert m.tobytes() == b.tobytes()

    def test_base_untouched(self):
        c = cfg("TABUV")
        p = init_adapter(c)
        randomize(p, np.random.default_rng(5))
        base = [np.ones((12, 4)) for _ in range(3)]
        merge(p, c, base)
        assert all((b == 1).all() for b in base)

    def test_worked_example(self):
        c = cfg("TABUV", d=1, L=1, r=1)
        p = init_adapter(c)
        p.A[0].assign([[2.0]])
        p.B[0].assign([[1.0], [-1.0], [0.5]])
        p.v[0].assign([1.0, 2.0, 0.0])
        W = np.array([[1.0], [1.0], [1.0]])
        np.testing.assert_array_equal(merge(p, c, [W])[0], W + np.array([[2.0], [-4.0], [0.0]]))

    @pytest.mark.parametrize("mode", ALL_MODES)
    def test_forward_equivalence(self, mode):
        for seed in range(10):
            c = cfg(mode, d=8, L=3, r=2, init_seed=seed)
            p = init_adapter(c)
            rng = np.random.default_rng(100 + seed)
            randomize(p, rng)
            base = [nk.Tensor(rng.normal(size=(24, 8))) for _ in range(3)]
            merged = merge(p, c, base)
            X = nk.Tensor(rng.normal(size=(8, 32)))
            for layer in range(3):
                via_adapter = adapter_forward(p, c, layer, base[layer], X).data
                assert nk.relative_error(merged[layer] @ X.data, via_adapter) <= 1e-9

    def test_layer_count_mismatch(self):
        c = cfg("TAB")
        with pytest.raises(DimensionError):
            merge(init_adapter(c), c, [np.zeros((12, 4))])


class TestTiedGradients:
    def test_single_layer(self):
        g = np.arange(6.0).reshape(2, 3)
        tied, untied = tied_grad_accumulate([g], True), tied_grad_accumulate([g], False)
        np.testing.assert_array_equal(tied[0], untied[0])

    def test_linearity(self):
        g = np.random.default_rng(0).normal(size=(2, 3))
        np.testing.assert_allclose(tied_grad_accumulate([g, g, g], True)[0], 3 * g, rtol=1e-15)

    def test_untied_keeps_layers(self):
        gs = [np.full((2,), float(i)) for i in range(3)]
        assert len(tied_grad_accumulate(gs, False)) == 3

    def test_shape_disagreement(self):
        with pytest.raises(DimensionError):
            tied_grad_accumulate([np.zeros(2), np.zeros(3)], True)

    @pytest.mark.parametrize("mode", ["TAB", "TABUV", "TAUV", "TA", "TB", "TBU"])
    def test_tied_equals_untied_clone_sum(self, mode):
        c = cfg(mode, d=5, L=3, r=2)
        p = init_adapter(c)
        rng = np.random.default_rng(6)
        randomize(p, rng)
        clone = AdapterParams(
            A=[nk.Tensor(t.data, requires_grad=t.requires_grad) for t in p.A],
            B=[nk.Tensor(t.data, requires_grad=t.requires_grad) for t in p.B],
            u=p.u,
            v=p.v,
            trainable=p.trainable,
            tied={"A": False, "B": False},
        )
        Ws = [nk.Tensor(rng.normal(size=(15, 5))) for _ in range(3)]
        X = nk.Tensor(rng.normal(size=(5, 4)))
        Y = nk.Tensor(rng.normal(size=(15, 4)))

        def loss(params):
            h = X
            total = None
            for layer in range(3):
                z = adapter_forward(params, c, layer, Ws[layer], h)
                term = nk.sum(nk.mul(z, Y))
                total = term if total is None else nk.add(total, term)
            return total

        for params in (p, clone):
            with nk.GradGraph() as g:
                out = loss(params)
            nk.backward(g, out)
        for comp in ("A", "B"):
            tied = getattr(p, comp)[0]
            if not tied.requires_grad:
                continue
            summed = tied_grad_accumulate([t.grad for t in getattr(clone, comp)], True)[0]
            assert nk.relative_error(tied.grad, summed) <= 1e-10


class TestSlots:
    def test_tuv(self):
        c = cfg("TUV", d=4, L=3, r=2)
        named = named_trainable_slots(init_adapter(c), c)
        assert [n for n, _ in named] == ["u.0", "v.0", "u.1", "v.1", "u.2", "v.2"]
        assert sum(t.size for _, t in named) == 3 * (2 + 12)

    def test_ta(self):
        c = cfg("TA", d=4, L=3, r=2)
        slots = trainable_slots(init_adapter(c), c)
        assert len(slots) == 1 and slots[0].shape == (2, 4)
        assert slots[0].size == 4 * 2

    def test_lora(self):
        c = cfg("LORA", d=4, L=3, r=2)
        names = [n for n, _ in named_trainable_slots(init_adapter(c), c)]
        assert names == ["A.0", "A.1", "A.2", "B.0", "B.1", "B.2"]

    @pytest.mark.parametrize("mode", ALL_MODES)
    def test_requires_grad_matches_mask(self, mode):
        c = cfg(mode)
        p = init_adapter(c)
        trained = {id(t) for t in trainable_slots(p, c)}
        for _, t in p.named_tensors():
            assert t.requires_grad == (id(t) in trained)


class TestValidate:
    def test_accepts_fresh(self):
        for mode in ALL_MODES:
            c = cfg(mode)
            validate_params(init_adapter(c), c)

    def test_rejects_rank_mismatch(self):
        p = init_adapter(cfg("TAB", r=2))
        with pytest.raises(DimensionError):
            validate_params(p, cfg("TAB", r=3))

    def test_rejects_mode_mismatch(self):
        p = init_adapter(cfg("TAB"))
        with pytest.raises(ValidationError):
            validate_params(p, cfg("TABUV"))


def test_mode_table_complete():
    assert set(MODES) == set(TiedLoraMode) and len(MODES) == 8
