import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tiedlora.adapter import ModelDims, TiedLoraConfig, init_adapter
from tiedlora.errors import DimensionError, GenerationError, ValidationError
from tiedlora.nanoformer import TransformerConfig, attach_adapter, build_model, forward
from tiedlora.taskgen import (
    LETTERS,
    VOCAB,
    Example,
    TaskDataset,
    distill_loss,
    encode_batch,
    evaluate,
    gen_seq_task,
    make_teacher,
    pretrain_mixture,
    probe_tokens,
    score_predictions,
    sequence_loss,
)


def text(ids):
    return VOCAB.decode(ids)


def small_model(seed=0, d=16, L=2, max_seq_len=32):
    return build_model(TransformerConfig(ModelDims(d, L), 2, VOCAB.size, max_seq_len), seed)


class TestVocabulary:
    def test_size_and_specials(self):
        assert VOCAB.size == 32
        assert VOCAB.decode([VOCAB.pad_id, VOCAB.eos_id]) == "_$"

    def test_round_trip(self):
        s = "abc|57+61=18<p"
        assert VOCAB.decode(VOCAB.encode(s)) == s

    def test_unknown_symbol(self):
        with pytest.raises(ValidationError):
            VOCAB.encode("xyz")


class TestGenSeqTask:
    @pytest.mark.parametrize("kind", ["copy", "reverse"])
    def test_targets_follow_rule(self, kind):
        ds = gen_seq_task(kind, 3, 50, 10, 10, 5)
        sep = "|" if kind == "copy" else "<"
        for e in ds.train + ds.val + ds.test:
            inp, tgt = text(e.input), text(e.target)
            assert inp.endswith(sep)
            s = inp[:-1]
            assert tgt == (s if kind == "copy" else s[::-1])

    def test_worked_examples(self):
        # copy "abc" -> "abc", reverse "ab" -> "ba", modadd 57+61 -> 18
        ds = TaskDataset.from_lines("x", {"test": ["abc|\tabc", "ab<\tba", "57+61=\t18"]})
        got = [(text(e.input), text(e.target)) for e in ds.test]
        assert got == [("abc|", "abc"), ("ab<", "ba"), ("57+61=", "18")]
        ds = gen_seq_task("modadd", 0, 200, 0, 0, 3)
        for e in ds.train:
            a, b = text(e.input)[:-1].split("+")
            assert int(text(e.target)) == (int(a) + int(b)) % 100

    def test_deterministic(self):
        a = gen_seq_task("copy", 7, 30, 5, 5, 4)
        b = gen_seq_task("copy", 7, 30, 5, 5, 4)
        assert a.to_lines("train") == b.to_lines("train")
        assert a.to_lines("test") == b.to_lines("test")
        c = gen_seq_task("copy", 8, 30, 5, 5, 4)
        assert a.to_lines("train") != c.to_lines("train")

    @settings(max_examples=30, deadline=None)
    @given(kind=st.sampled_from(["copy", "reverse", "modadd"]), seed=st.integers(0, 10**6),
           n=st.integers(1, 40), max_len=st.integers(2, 6))
    def test_splits_disjoint_and_nonempty(self, kind, seed, n, max_len):
        ds = gen_seq_task(kind, seed, n, n // 2 + 1, n // 3 + 1, max_len)
        inputs = [e.input for e in ds.train + ds.val + ds.test]
        assert len(set(inputs)) == len(inputs)
        assert all(len(e.target) > 0 for e in ds.train + ds.val + ds.test)
        assert all(0 <= t < VOCAB.size for e in ds.train for t in e.input + e.target)

    def test_too_few_distinct_inputs(self):
        # alphabet "ab", length 1..2 gives 2 + 4 = 6 distinct strings
        gen_seq_task("copy", 0, 4, 1, 1, 2, alphabet="ab")
        with pytest.raises(GenerationError):
            gen_seq_task("copy", 0, 5, 1, 1, 2, alphabet="ab")

    def test_sequence_length_precondition(self):
        gen_seq_task("copy", 0, 5, 1, 1, 6, max_seq_len=14)
        with pytest.raises(ValidationError):
            gen_seq_task("copy", 0, 5, 1, 1, 7, max_seq_len=14)

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            gen_seq_task("sort", 0, 1, 1, 1, 3)

    def test_lines_round_trip(self):
        ds = gen_seq_task("reverse", 2, 10, 3, 3, 4)
        back = TaskDataset.from_lines("reverse", {s: ds.to_lines(s) for s in ("train", "val", "test")})
        assert back.train == ds.train and back.val == ds.val and back.test == ds.test
        assert all("\t" in line for line in ds.to_lines("train"))


class TestMixture:
    def test_copy_held_out_letters(self):
        mix = pretrain_mixture(0, 200, 5, held_out_letters=8)
        copies = [text(e.input) for e in mix.train if text(e.input).endswith("|")]
        assert copies
        assert set("".join(c[:-1] for c in copies)) <= set(LETTERS[:8])
        reverses = [text(e.input) for e in mix.train if text(e.input).endswith("<")]
        assert set("".join(r[:-1] for r in reverses)) - set(LETTERS[:8])

    def test_sizes_and_metric(self):
        mix = pretrain_mixture(1, 80, 4)
        assert len(mix.train) == 240 and len(mix.val) == 30 and mix.metric == "token_accuracy"


class TestBatching:
    def test_mask_covers_target_and_eos(self):
        ex = Example(VOCAB.encode("ab|"), VOCAB.encode("ab"))
        b = encode_batch([ex, Example(VOCAB.encode("a|"), VOCAB.encode("a"))], VOCAB)
        # sequence "ab|ab$": inputs "ab|ab", targets "b|ab$"
        assert text(b.tokens[0]) == "ab|ab"
        assert text(b.targets[0]) == "b|ab$"
        assert b.mask[0].tolist() == [False, False, True, True, True]
        assert text(b.targets[1][b.mask[1]]) == "a$"
        assert b.n_positions == 5

    def test_empty(self):
        with pytest.raises(ValidationError):
            encode_batch([], VOCAB)

    def test_loss_near_log_vocab_at_init(self):
        m = small_model()
        ds = gen_seq_task("copy", 0, 16, 1, 1, 4)
        loss = sequence_loss(m, encode_batch(ds.train, VOCAB)).item()
        assert abs(loss - math.log(VOCAB.size)) < 0.5


class TestScoring:
    def test_exact_match(self):
        assert score_predictions([[1, 2], [3]], [[1, 2], [4]], "exact_match") == 0.5

    def test_empty_prediction_scores_zero(self):
        assert score_predictions([[]], [[5]], "exact_match") == 0.0
        assert score_predictions([[]], [[5]], "token_accuracy") == 0.0

    def test_token_accuracy_pooled(self):
        # 2 of 3 target positions hit; extra predicted tokens ignored
        assert score_predictions([[1, 9, 7, 7], [3]], [[1, 2], [3]], "token_accuracy") == pytest.approx(2 / 3)

    def test_random_predictions_binomial(self):
        rng = np.random.default_rng(0)
        n = 4000
        preds = rng.integers(0, 10, size=(n, 1)).tolist()
        targets = rng.integers(0, 10, size=(n, 1)).tolist()
        acc = score_predictions(preds, targets, "token_accuracy")
        half_width = 4 * math.sqrt(0.1 * 0.9 / n)
        assert abs(acc - 0.1) < half_width

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            score_predictions([[1]], [], "exact_match")

    def test_unknown_metric(self):
        with pytest.raises(ValidationError):
            score_predictions([[1]], [[1]], "bleu")


def forcing_model(token_id, seed=0):
    """Model whose logits always peak at ``token_id``."""
    m = small_model(seed)
    head = np.zeros_like(m.base.head.data)
    lnf_bias = np.zeros_like(m.base.lnf_bias.data)
    lnf_bias[0] = 1.0
    head[0, token_id] = 10.0
    m.base.head.assign(head)
    m.base.lnf_bias.assign(lnf_bias)
    m.base.lnf_gain.assign(np.zeros_like(m.base.lnf_gain.data))
    return m


class TestEvaluate:
    def test_memorized_single_example(self):
        a = VOCAB.encode("a")[0]
        ds = TaskDataset("one", VOCAB, [], [], [Example(VOCAB.encode("c|"), (a,))])
        assert evaluate(forcing_model(a), ds, max_new_tokens=1) == 1.0

    def test_order_invariant(self):
        m = small_model(3)
        ds = gen_seq_task("copy", 5, 1, 1, 24, 4)
        rev = TaskDataset(ds.name, VOCAB, ds.train, ds.val, ds.test[::-1])
        for metric in ("exact_match", "token_accuracy"):
            assert evaluate(m, ds, metric=metric) == evaluate(m, rev, metric=metric)

    def test_score_in_unit_interval(self):
        m = small_model(4)
        ds = gen_seq_task("reverse", 1, 1, 1, 16, 4)
        s = evaluate(m, ds, metric="token_accuracy")
        assert 0.0 <= s <= 1.0

    def test_vocab_too_small(self):
        m = build_model(TransformerConfig(ModelDims(8, 1), 2, 10, 16), 0)
        ds = gen_seq_task("copy", 0, 1, 1, 2, 3)
        with pytest.raises(ValidationError):
            evaluate(m, ds)


class TestTeacher:
    @pytest.mark.parametrize("r_true", [1, 3, 8])
    def test_delta_rank_exact(self, r_true):
        base = small_model(1, d=8, L=2)
        spec, teacher = make_teacher(base, r_true, seed=5)
        for bl, tl in zip(base.base.layers, teacher.base.layers):
            diff = tl.qkv.data - bl.qkv.data
            sv = np.linalg.svd(diff, compute_uv=False)
            assert int((sv > sv[0] * 1e-10).sum()) == min(r_true, 8)

    def test_only_qkv_differs_and_base_untouched(self):
        base = small_model(2)
        before = {n: t.data.copy() for n, t in base.base.named_tensors()}
        _, teacher = make_teacher(base, 2, seed=0)
        for (n, t), (n2, t2) in zip(base.base.named_tensors(), teacher.base.named_tensors()):
            assert n == n2
            np.testing.assert_array_equal(t.data, before[n])
            if n.endswith(".qkv"):
                assert not np.array_equal(t.data, t2.data)
            else:
                np.testing.assert_array_equal(t.data, t2.data)

    def test_factor_scale(self):
        # factor entries have std 1/sqrt(d * r_true)
        base = small_model(0, d=32, L=2)
        spec, _ = make_teacher(base, 4, seed=1)
        P = np.concatenate([p.ravel() for p, _ in spec.factors])
        assert abs(P.std() - 1 / math.sqrt(32 * 4)) < 0.1 / math.sqrt(32 * 4)

    def test_rank_zero_rejected(self):
        with pytest.raises(ValidationError):
            make_teacher(small_model(), 0, seed=0)


class TestDistillLoss:
    def test_identical_models_zero(self):
        base = small_model(0)
        probes = probe_tokens(base.config, 4, 8, seed=0)
        assert distill_loss(base, base, probes).item() == 0.0
        _, teacher = make_teacher(base, 2, seed=0)
        assert distill_loss(teacher, teacher, probes).item() == 0.0

    def test_matches_numpy_mse(self):
        base = small_model(0)
        _, teacher = make_teacher(base, 2, seed=3)
        probes = probe_tokens(base.config, 3, 6, seed=1)
        ref = np.mean((forward(base, probes).data - forward(teacher, probes).data) ** 2)
        assert distill_loss(base, teacher, probes).item() == pytest.approx(ref, rel=1e-12)
        assert ref > 0

    def test_geometry_mismatch(self):
        a, b = small_model(0, d=16), small_model(0, d=8)
        with pytest.raises(DimensionError):
            distill_loss(a, b, probe_tokens(a.config, 1, 4, 0))

    def test_probe_length_checked(self):
        with pytest.raises(DimensionError):
            probe_tokens(small_model().config, 1, 33, 0)

    def test_gradient_reaches_adapter_only(self):
        from tiedlora import numkit as nk

        base = small_model(0)
        _, teacher = make_teacher(base, 2, seed=0)
        cfg = TiedLoraConfig("TABUV", 2, base.config.dims)
        params = init_adapter(cfg)
        student = attach_adapter(base, params, cfg)
        probes = probe_tokens(base.config, 2, 6, seed=0)
        with nk.GradGraph() as g:
            loss = distill_loss(student, teacher, probes)
        nk.backward(g, loss)
        assert all(t.grad is None for _, t in base.base.named_tensors())
        assert all(t.grad is None for _, t in teacher.base.named_tensors())
        assert any(np.any(t.grad) for t in params.v)
