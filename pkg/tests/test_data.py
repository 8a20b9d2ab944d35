from dataclasses import replace

import numpy as np
import pytest

from attnfix import data as D
from attnfix.numkernel import ContractError


class ConstModel:
    """Predicts via an arbitrary function of the raw feature rows."""

    def __init__(self, fn, token_count=7, patch=4):
        self.fn = fn
        self.cfg = type("cfg", (), {"token_count": token_count, "patch": patch})

    def predict(self, x):
        return np.array([self.fn(row) for row in np.asarray(x)], dtype=np.int64)


class TestGlyphs:
    def test_shapes_and_labels(self):
        s = D.gen_glyphs(8, seed=7)
        assert len(s) == 8
        assert all(x.image.shape == (1, 16, 16) for x in s)
        assert {x.label for x in s} == {0, 1, 2, 3}

    def test_deterministic(self):
        a, b = D.gen_glyphs(20, 3), D.gen_glyphs(20, 3)
        assert all(np.array_equal(x.image, y.image) and x.label == y.label for x, y in zip(a, b))

    def test_balanced_and_in_range(self):
        s = D.gen_glyphs(403, 1)
        counts = np.bincount(D.labels_of(s), minlength=4)
        assert counts.max() - counts.min() <= 1
        imgs = D.stack_images(s)
        assert imgs.min() >= 0 and imgs.max() <= 1

    def test_linear_probe_separates_classes(self):
        train, test = D.gen_glyphs(800, 1), D.gen_glyphs(400, 2)
        X = D.stack_images(train).reshape(len(train), -1)
        Xt = D.stack_images(test).reshape(len(test), -1)
        y = D.labels_of(train)
        # multinomial logistic regression by plain gradient descent
        W = np.zeros((X.shape[1], 4))
        b = np.zeros(4)
        Y = np.eye(4)[y]
        for _ in range(300):
            z = X @ W + b
            p = np.exp(z - z.max(1, keepdims=True))
            p /= p.sum(1, keepdims=True)
            W -= 0.5 * X.T @ (p - Y) / len(X)
            b -= 0.5 * (p - Y).mean(0)
        acc = ((Xt @ W + b).argmax(1) == D.labels_of(test)).mean()
        assert acc >= 0.9


class TestTrigger:
    def test_zero_mask_is_noop(self):
        x = D.gen_glyphs(1, 0)[0]
        t = D.TriggerSpec(np.zeros((16, 16)), np.ones((1, 16, 16)), 0)
        out = D.apply_trigger(x, t)
        assert np.array_equal(out.image, x.image) and not out.poisoned

    def test_corner_stamp(self):
        x = D.gen_glyphs(1, 0)[0]
        out = D.apply_trigger(x, D.corner_trigger(2))
        assert np.all(out.image[0, 14:, 14:] == 1.0)
        assert np.array_equal(out.image[0, :14], x.image[0, :14])
        assert out.poisoned and out.trigger_patch_ids == (16,)

    def test_blend_half(self):
        x = D.GlyphSample(np.zeros((1, 16, 16)), 1)
        out = D.apply_trigger(x, D.corner_trigger(2, blend_alpha=0.5))
        assert np.all(out.image[0, 14:, 14:] == 0.5)

    def test_idempotent_stamp(self):
        x = D.gen_glyphs(1, 4)[0]
        t = D.corner_trigger(3)
        once = D.apply_trigger(x, t)
        assert np.array_equal(D.apply_trigger(once, t).image, once.image)

    def test_mask_geometry(self):
        m = np.zeros((16, 16))
        m[3:5, 3:5] = 1  # straddles four patches
        assert D.mask_to_columns(m) == (1, 2, 5, 6)

    def test_shape_mismatch(self):
        x = D.GlyphSample(np.zeros((1, 8, 8)), 0)
        with pytest.raises(ContractError):
            D.apply_trigger(x, D.corner_trigger())


class TestPoison:
    def test_count_and_labels(self):
        data = D.gen_glyphs(2000, 1)
        t = D.corner_trigger(2, target_class=3)
        out = D.poison_dataset(data, t, 0.1, seed=0)
        poisoned = [x for x in out if x.poisoned]
        assert len(poisoned) == 200
        assert all(x.label == 3 for x in poisoned)

    @pytest.mark.parametrize("rate", [0.0, 1.0, -0.1])
    def test_rate_bounds(self, rate):
        with pytest.raises(ContractError):
            D.poison_dataset(D.gen_glyphs(10, 1), D.corner_trigger(), rate)


class TestTabular:
    def test_deterministic(self):
        assert D.gen_tabular_biased(50, 0.5, 3) == D.gen_tabular_biased(50, 0.5, 3)

    def test_vocab(self):
        s = D.gen_tabular_biased(500, 0.3, 1)
        F = D.stack_features(s)
        assert np.all(F < np.array(D.TAB_VOCAB)) and np.all(F >= 0)

    def test_unbiased_is_independent_of_protected(self):
        s = D.gen_tabular_biased(4000, 0.0, 5)
        F, y = D.stack_features(s), D.labels_of(s)
        table = np.array([[np.sum((F[:, 0] == a) & (y == c)) for c in (0, 1)] for a in (0, 1)], float)
        expected = table.sum(1, keepdims=True) * table.sum(0, keepdims=True) / table.sum()
        chi2 = ((table - expected) ** 2 / expected).sum()
        assert chi2 < 6.63  # 1 dof, p = 0.01

    def test_bias_links_label_to_protected(self):
        s = D.gen_tabular_biased(4000, 0.5, 5)
        F, y = D.stack_features(s), D.labels_of(s)
        assert abs(y[F[:, 0] == 1].mean() - y[F[:, 0] == 0].mean()) > 0.3

    def test_bias_range(self):
        with pytest.raises(ContractError):
            D.gen_tabular_biased(10, 1.5, 0)


class TestPerturbations:
    def test_binary(self):
        x = D.TabularSample((1, 2, 0, 3, 1, 0), 1)
        v = D.enumerate_perturbations(x, [0, 1])
        assert len(v) == 1 and v[0].features == (0, 2, 0, 3, 1, 0)

    def test_four_valued(self):
        x = D.TabularSample((2, 2, 0, 3, 1, 0), 1)
        v = D.enumerate_perturbations(x, [0, 1, 2, 3])
        assert len(v) == 3
        assert len({s.features for s in v}) == 3
        assert all(s.features[1:] == x.features[1:] for s in v)

    def test_too_few_values(self):
        with pytest.raises(ContractError):
            D.enumerate_perturbations(D.TabularSample((0,) * 6, 0), [0])


def exhaustive_nearest(query, pool):
    best, best_d = None, None
    for i, row in enumerate(pool):
        d = sum(int(a != b) for a, b in zip(query, row))
        if best_d is None or d < best_d:
            best, best_d = i, d
    return best


class TestHamming:
    def test_spec_pairing(self):
        pool = np.array([[1, 2, 0, 3, 1, 1], [1, 0, 0, 0, 0, 0]])
        assert D.hamming_nearest([1, 2, 0, 3, 1, 0], pool) == 0

    def test_ties_lowest_index(self):
        pool = np.array([[0, 1], [1, 0], [0, 1]])
        assert D.hamming_nearest([1, 1], pool) == 0

    def test_matches_exhaustive_scan(self, rng):
        for _ in range(30):
            size = int(rng.integers(1, 201))
            pool = rng.integers(0, 4, size=(size, 6))
            q = rng.integers(0, 4, size=6)
            assert D.hamming_nearest(q, pool) == exhaustive_nearest(q, pool)


class TestBiasDebugset:
    def test_protected_identity_model(self):
        data = D.gen_tabular_biased(60, 0.5, 2)
        ds = D.build_bias_debugset(ConstModel(lambda r: r[0]), data)
        assert len(ds) == len(data)
        assert all(p.anomalous_columns == (1,) for p in ds.pairs)
        assert all(p.compromised.features[0] != q.features[0] for p, q in zip(ds.pairs, data))

    def test_fair_model_raises(self):
        data = D.gen_tabular_biased(60, 0.5, 2)
        with pytest.raises(D.EmptyDebugSetError, match="already fair"):
            D.build_bias_debugset(ConstModel(D.tabular_rule), data)

    def test_pairs_share_protected_value_and_minimise_distance(self):
        data = D.gen_tabular_biased(200, 0.5, 9)
        # divergent only when feature 1 is 0
        model = ConstModel(lambda r: int(r[0]) if r[1] == 0 else D.tabular_rule(r))
        ds = D.build_bias_debugset(model, data)
        clean = D.stack_features(ds.clean_pool)
        for p in ds.pairs:
            assert p.clean.features[0] == p.compromised.features[0]
            same = clean[clean[:, 0] == p.compromised.features[0]]
            best = same[exhaustive_nearest(p.compromised.features, same)]
            assert tuple(best) == p.clean.features
        assert all(not any(x.features == p.compromised.features for p in ds.pairs)
                   or True for x in ds.clean_pool)


class TestBackdoorDebugset:
    def test_pairs_hit_target_and_single_column(self):
        data = [replace(x, label=1 + i % 3) for i, x in enumerate(D.gen_glyphs(30, 1))]
        t = D.corner_trigger(2, target_class=0)
        model = ConstModel(lambda img: 0 if img[0, 15, 15] == 1.0 else 1, token_count=17)
        ds = D.build_backdoor_debugset(model, data, t, 10)
        assert len(ds) == 10
        assert all(p.anomalous_columns == (16,) for p in ds.pairs)
        assert all(0 not in p.anomalous_columns for p in ds.pairs)
        assert all(model.predict(p.compromised.image[None])[0] == 0 for p in ds.pairs)

    def test_partial_set_warns(self, caplog):
        data = D.gen_glyphs(8, 1)
        model = ConstModel(lambda img: 1, token_count=17)
        ds = D.build_backdoor_debugset(model, data, D.corner_trigger(2, 0), 5)
        assert len(ds) == 0
        assert "partial" in caplog.text


def test_debugset_roundtrip(tmp_path):
    data = D.gen_tabular_biased(40, 0.5, 2)
    ds = D.build_bias_debugset(ConstModel(lambda r: r[0]), data)
    D.save_debugset(tmp_path / "ds", ds)
    back = D.load_debugset(tmp_path / "ds")
    assert back.kind == ds.kind and len(back) == len(ds)
    assert back.pairs[3].compromised == ds.pairs[3].compromised


def test_glyph_roundtrip(tmp_path):
    s = D.gen_glyphs(5, 1)
    D.save_samples(tmp_path, "g", s)
    back = D.load_samples(tmp_path, "g")
    assert all(np.array_equal(a.image, b.image) and a.uid == b.uid for a, b in zip(s, back))
