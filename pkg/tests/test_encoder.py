"""Encoder forward pass: init, attention blocks, pooling, head, checkpoints."""

import math

import numpy as np
import pytest

from trialspan.embedding import S_MAX, S_TOTAL, HashedProvider, build_features
from trialspan.encoder import (
    LN_EPS,
    ModelConfig,
    ModelParams,
    add_cls_row,
    concat_features,
    encode_criteria,
    expected_param_count,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from trialspan.errors import CheckpointError, NumericError

from _synth import make_records, make_trials


def small_params(seed=0, d=16, heads=2, dropout=0.0, layers=1):
    return init_params(ModelConfig(d=d, heads=heads, layers=layers,
                                   dropout=dropout, seed=seed))


class TestModelConfig:
    def test_defaults_follow_d(self):
        cfg = ModelConfig(d=768)
        assert cfg.ffn_dim == 768
        assert cfg.mlp_hidden1 == 2 * 768
        assert cfg.mlp_hidden2 == 768
        assert cfg.feature_dim == 3076

    @pytest.mark.parametrize("kwargs", [
        dict(d=16, heads=5),
        dict(d=15, heads=2),
        dict(d=16, heads=2, layers=0),
        dict(d=16, heads=2, dropout=1.0),
        dict(d=16, heads=2, dropout=-0.1),
    ])
    def test_invalid_configs(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)


class TestInitParams:
    def test_seed_determinism(self):
        a = small_params(seed=11)
        b = small_params(seed=11)
        np.testing.assert_array_equal(a.to_flat(), b.to_flat())

    def test_different_seeds_differ(self):
        assert not np.array_equal(small_params(seed=1).to_flat(),
                                  small_params(seed=2).to_flat())

    def test_xavier_bound_for_16x16(self):
        params = small_params(seed=0)
        bound = math.sqrt(6 / 32)
        w = params.layers[0].w_q
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.8 * bound  # 256 uniform draws reach near the bound

    def test_biases_zero_gains_one(self):
        params = small_params(seed=0)
        assert np.all(params.layers[0].b_q == 0)
        assert np.all(params.layers[0].ln1_g == 1)
        assert np.all(params.head.b1 == 0)

    @pytest.mark.parametrize("cfg", [
        ModelConfig(d=16, heads=2),
        ModelConfig(d=16, heads=4, layers=2),
        ModelConfig(d=24, heads=3, ffn_dim=48),
        ModelConfig(d=768, heads=4),
    ])
    def test_shape_audit(self, cfg):
        if cfg.d == 768:  # too big to allocate twice; count from shapes only
            params = init_params(cfg)
            assert params.param_count == expected_param_count(cfg)
        else:
            params = init_params(cfg)
            assert params.param_count == expected_param_count(cfg)
            round_tripped = ModelParams.from_flat(cfg, params.to_flat())
            np.testing.assert_array_equal(round_tripped.to_flat(), params.to_flat())


def _trial(seed=0, dim=16):
    return make_trials(1, seed=seed, dim=dim)[0]


class TestEncodeCriteria:
    def test_zero_output_projections_give_identity(self):
        params = small_params(seed=3)
        lp = params.layers[0]
        lp.w_o[:] = 0.0
        lp.ffn_w2[:] = 0.0
        trial = _trial(seed=1)
        incl, excl = encode_criteria(params, trial.sentence_mat, trial.sentence_mask)
        raw_incl = trial.sentence_mat[:S_MAX][trial.sentence_mask[:S_MAX]].mean(axis=0)
        raw_excl = trial.sentence_mat[S_MAX:][trial.sentence_mask[S_MAX:]].mean(axis=0)
        np.testing.assert_allclose(incl, raw_incl, atol=1e-12)
        np.testing.assert_allclose(excl, raw_excl, atol=1e-12)

    def test_padding_rows_do_not_matter(self):
        params = small_params(seed=4)
        trial = _trial(seed=2)
        incl_a, excl_a = encode_criteria(params, trial.sentence_mat, trial.sentence_mask)
        mutated = trial.sentence_mat.copy()
        rng = np.random.default_rng(0)
        mutated[~trial.sentence_mask] = rng.normal(size=mutated[~trial.sentence_mask].shape)
        incl_b, excl_b = encode_criteria(params, mutated, trial.sentence_mask)
        np.testing.assert_allclose(incl_a, incl_b, atol=1e-12)
        np.testing.assert_allclose(excl_a, excl_b, atol=1e-12)

    def test_matches_straight_line_oracle(self):
        params = small_params(seed=5)
        mat = np.zeros((S_TOTAL, 16))
        mask = np.zeros(S_TOTAL, dtype=bool)
        rng = np.random.default_rng(7)
        mat[0] = rng.normal(size=16)
        mat[S_MAX] = rng.normal(size=16)
        mask[0] = mask[S_MAX] = True
        incl, excl = encode_criteria(params, mat, mask)
        oracle_incl, oracle_excl = _oracle_encode(params, mat, mask)
        np.testing.assert_allclose(incl, oracle_incl, atol=1e-9)
        np.testing.assert_allclose(excl, oracle_excl, atol=1e-9)

    def test_empty_segment_falls_back_to_cls(self):
        params = small_params(seed=6)
        trial = _trial(seed=3)
        mat = trial.sentence_mat.copy()
        mask = trial.sentence_mask.copy()
        mat[S_MAX:] = 0.0
        mask[S_MAX:] = False  # no exclusion sentences left
        incl, excl = encode_criteria(params, mat, mask)
        assert np.isfinite(incl).all() and np.isfinite(excl).all()
        # fully masked input takes the CLS-only path for both segments
        all_masked = np.zeros_like(mask)
        incl0, excl0 = encode_criteria(params, np.zeros_like(mat), all_masked)
        np.testing.assert_allclose(incl0, excl0)

    def test_segment_argument_is_validated(self):
        params = small_params(seed=7)
        trial = _trial(seed=4)
        with pytest.raises(ValueError):
            encode_criteria(params, trial.sentence_mat, trial.sentence_mask,
                            segment=("exclusion",) * S_TOTAL)


def _oracle_encode(params, sentence_mat, mask):
    """Naive per-position reimplementation of the transformer block chain."""
    cfg = params.config
    d, H = cfg.d, cfg.heads
    dh = d // H
    X = np.vstack([params.cls_vec, sentence_mat]).astype(float)
    valid = np.concatenate([[True], mask])
    S = X.shape[0]

    def ln(row, g, b):
        mu = row.mean()
        var = ((row - mu) ** 2).mean()
        return g * (row - mu) / math.sqrt(var + LN_EPS) + b

    for lp in params.layers:
        normed = np.array([ln(X[s], lp.ln1_g, lp.ln1_b) for s in range(S)])
        q = normed @ lp.w_q + lp.b_q
        k = normed @ lp.w_k + lp.b_k
        v = normed @ lp.w_v + lp.b_v
        mixed = np.zeros_like(X)
        for h in range(H):
            sl = slice(h * dh, (h + 1) * dh)
            for i in range(S):
                scores = np.full(S, -np.inf)
                for j in range(S):
                    if valid[j]:
                        scores[j] = q[i, sl] @ k[j, sl] / math.sqrt(dh)
                scores -= scores.max()
                weights = np.exp(scores)
                weights /= weights.sum()
                for j in range(S):
                    if valid[j]:
                        mixed[i, sl] += weights[j] * v[j, sl]
        X = X + mixed @ lp.w_o + lp.b_o
        normed2 = np.array([ln(X[s], lp.ln2_g, lp.ln2_b) for s in range(S)])
        hidden = normed2 @ lp.ffn_w1 + lp.ffn_b1
        gelu = np.array([[x * 0.5 * (1 + math.erf(x / math.sqrt(2))) for x in row]
                         for row in hidden])
        X = X + gelu @ lp.ffn_w2 + lp.ffn_b2

    def pooled(rows, m):
        if not m.any():
            return X[0]
        return rows[m].mean(axis=0)

    return (pooled(X[1:1 + S_MAX], mask[:S_MAX]),
            pooled(X[1 + S_MAX:], mask[S_MAX:]))


class TestConcatFeatures:
    def test_full_scale_length(self):
        parts = [np.zeros(4)] + [np.zeros(768)] * 4
        assert concat_features(*parts).shape == (3076,)

    def test_small_scale_length(self):
        parts = [np.zeros(4)] + [np.zeros(16)] * 4
        assert concat_features(*parts).shape == (68,)

    def test_zero_inputs_stay_zero(self):
        parts = [np.zeros(4)] + [np.zeros(16)] * 4
        np.testing.assert_array_equal(concat_features(*parts), np.zeros(68))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            concat_features(np.zeros(4), np.zeros(16), np.zeros(16),
                            np.zeros(16), np.zeros(15))
        with pytest.raises(ValueError):
            concat_features(np.zeros(3), np.zeros(16), np.zeros(16),
                            np.zeros(16), np.zeros(16))


class TestForward:
    def test_positive_predictions(self):
        for seed in range(10):
            params = small_params(seed=seed)
            trial = _trial(seed=seed)
            assert forward(params, trial) > 0.0

    def test_inference_determinism(self):
        params = small_params(seed=8)
        trial = _trial(seed=5)
        assert forward(params, trial) == forward(params, trial)

    def test_zero_head_gives_softplus_zero(self):
        params = small_params(seed=9)
        params.head.w1[:] = 0.0
        params.head.w2[:] = 0.0
        params.head.w3[:] = 0.0
        assert forward(params, _trial(seed=6)) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_nan_input_raises_named_numeric_error(self):
        params = small_params(seed=10)
        trial = _trial(seed=7)
        trial.sentence_mat[trial.sentence_mask] = np.nan
        with pytest.raises(NumericError, match="criteria_pooling"):
            forward(params, trial)

    def test_dim_mismatch(self):
        params = small_params(seed=11, d=16)
        with pytest.raises(ValueError):
            forward(params, _trial(seed=8, dim=32))

    def test_train_mode_requires_rng_when_dropout_on(self):
        params = init_params(ModelConfig(d=16, heads=2, dropout=0.1, seed=0))
        with pytest.raises(ValueError):
            forward(params, _trial(seed=9), train_mode=True)


class TestAddClsRow:
    def test_shapes(self):
        params = small_params(seed=12)
        trial = _trial(seed=10)
        assert trial.sentence_mat.shape == (S_TOTAL, 16)
        assert add_cls_row(params, trial.sentence_mat).shape == (S_TOTAL + 1, 16)

    def test_wrong_shape_rejected(self):
        params = small_params(seed=13)
        with pytest.raises(ValueError):
            add_cls_row(params, np.zeros((S_TOTAL, 8)))


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        params = small_params(seed=14)
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, path)
        loaded = load_checkpoint(path)
        np.testing.assert_array_equal(loaded.to_flat(),
                                      params.to_flat().astype("<f4").astype(np.float64))
        assert loaded.config == params.config

    def test_byte_determinism(self, tmp_path):
        params = small_params(seed=15)
        for run in ("run1", "run2"):
            (tmp_path / run).mkdir()
            save_checkpoint(params, tmp_path / run / "model.ckpt")
        assert ((tmp_path / "run1" / "model.ckpt").read_bytes()
                == (tmp_path / "run2" / "model.ckpt").read_bytes())
        assert ((tmp_path / "run1" / "model.ckpt.bin").read_bytes()
                == (tmp_path / "run2" / "model.ckpt.bin").read_bytes())

    def test_truncated_array_file_rejected(self, tmp_path):
        params = small_params(seed=16)
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, path)
        blob = (tmp_path / "model.ckpt.bin").read_bytes()
        (tmp_path / "model.ckpt.bin").write_bytes(blob[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
