"""Parameter init, negative sampling, the multi-view forward pass with
ablation flags, gradient correctness against finite differences, Adam, and
the fit loop."""

import numpy as np
import pytest

from mhcr import autodiff as ad
from mhcr import evaluation
from mhcr.dataio import SyntheticConfig, generate_synthetic, split_dataset
from mhcr.errors import ConfigError, NumericError
from mhcr.objectives import bpr_loss
from mhcr.training import (
    Adam,
    Batch,
    TrainConfig,
    apply_variant,
    backward_and_step,
    build_views,
    compute_embeddings,
    evaluate_params,
    fit,
    forward,
    init_parameters,
    sample_negatives,
    train_item_sets,
    variant_label,
)

from conftest import assert_grad_close, finite_difference, micro_batch, micro_config, micro_dataset

MASK_SEED = 1234


def make_params(cfg, ds, views, seed=None):
    return init_parameters(cfg, ds.num_users, ds.num_items, views.modality_dims, seed)


class TestInit:
    def test_deterministic(self, micro):
        ds, _, cfg, views = micro
        a = make_params(cfg, ds, views, seed=5)
        b = make_params(cfg, ds, views, seed=5)
        for (name, ta), tb in zip(a.tensors().items(), b.tensors().values()):
            assert np.array_equal(ta.data, tb.data), name

    def test_different_seeds_differ(self, micro):
        ds, _, cfg, views = micro
        a = make_params(cfg, ds, views, seed=5)
        b = make_params(cfg, ds, views, seed=6)
        assert not np.array_equal(a.e0.data, b.e0.data)

    def test_row_norms_concentrate_near_one(self):
        cfg = TrainConfig(d=64)
        params = init_parameters(cfg, 500, 500, {"image": 16}, rng_seed=0)
        norms = np.linalg.norm(params.e0.data, axis=1)
        assert 0.8 <= norms.mean() <= 1.2


class TestNegativeSampling:
    def test_avoids_train_items(self, micro):
        ds, _, _, _ = micro
        rng = np.random.default_rng(0)
        sets = train_item_sets(ds)
        users = np.repeat(np.arange(4), 25)
        negs = sample_negatives(ds, users, rng, sets)
        for u, j in zip(users.tolist(), negs.tolist()):
            assert j not in sets[u]

    def test_all_items_seen_falls_back(self):
        from mhcr.dataio import InteractionDataset

        ds = InteractionDataset(
            1, 2, np.array([0, 0]), np.array([0, 1]), split=np.array([0, 0])
        )
        negs = sample_negatives(ds, np.array([0, 0, 0]), np.random.default_rng(1))
        assert set(negs.tolist()) <= {0, 1}

    def test_reproducible_given_seed(self, micro):
        ds, _, _, _ = micro
        users = np.repeat(np.arange(4), 10)
        a = sample_negatives(ds, users, np.random.default_rng(3))
        b = sample_negatives(ds, users, np.random.default_rng(3))
        assert np.array_equal(a, b)


class TestForward:
    def test_eval_deterministic(self, micro):
        ds, _, cfg, views = micro
        params = make_params(cfg, ds, views)
        a = forward(params, views, cfg, mode="eval")
        b = forward(params, views, cfg, mode="eval")
        assert np.array_equal(a.fused.data, b.fused.data)

    def test_ui_only_reduces_to_bpr_on_ui_scores(self, micro):
        ds, _, _, views = micro
        cfg = micro_config(use_ii=False, use_hem=False, use_hc=False, use_ghc=False)
        params = make_params(cfg, ds, views)
        batch = micro_batch()
        result = forward(params, views, cfg, batch=batch, mode="train", rng=MASK_SEED)
        assert result.breakdown.l_hc == 0.0
        assert result.breakdown.l_ghc == 0.0

        e_ui = result.e_ui.data
        u = e_ui[batch.users]
        pos = e_ui[ds.num_users + batch.pos_items]
        neg = e_ui[ds.num_users + batch.neg_items]
        expected = bpr_loss((u * pos).sum(axis=1), (u * neg).sum(axis=1)).item()
        assert result.breakdown.l_bpr == pytest.approx(expected, abs=1e-12)
        assert result.breakdown.total == pytest.approx(
            expected + cfg.lambda_reg * result.breakdown.l_reg, abs=1e-12
        )

    def test_hem_off_forces_contrastive_zero(self, micro):
        ds, _, _, views = micro
        cfg = micro_config(use_hem=False)
        params = make_params(cfg, ds, views)
        result = forward(params, views, cfg, batch=micro_batch(), mode="train", rng=MASK_SEED)
        assert result.breakdown.l_hc == 0.0
        assert result.breakdown.l_ghc == 0.0
        assert np.allclose(result.e_h.data, 0.0)

    def test_disabling_one_view_leaves_others_bitwise_identical(self, micro):
        ds, _, cfg, views = micro
        params = make_params(cfg, ds, views)
        batch = micro_batch()
        full = forward(params, views, cfg, batch=batch, mode="train", rng=MASK_SEED)
        for flag, others in (
            ("use_ui", ("e_ii", "e_h")),
            ("use_ii", ("e_ui", "e_h")),
            ("use_hem", ("e_ui", "e_ii")),
        ):
            ablated_cfg = micro_config(**{flag: False})
            ablated = forward(params, views, ablated_cfg, batch=batch, mode="train", rng=MASK_SEED)
            for view in others:
                assert np.array_equal(
                    getattr(full, view).data, getattr(ablated, view).data
                ), (flag, view)

    def test_fusion_is_sum_of_views(self, micro):
        ds, _, cfg, views = micro
        params = make_params(cfg, ds, views)
        result = forward(params, views, cfg, mode="eval")
        assert np.allclose(
            result.fused.data, result.e_ui.data + result.e_ii.data + result.e_h.data
        )

    def test_hc_requires_two_modalities(self, micro):
        ds, feats, _, _ = micro
        cfg = micro_config()
        views = build_views(ds, feats[:1], cfg)
        params = init_parameters(cfg, ds.num_users, ds.num_items, views.modality_dims)
        with pytest.raises(ConfigError):
            forward(params, views, cfg, batch=micro_batch(), mode="train", rng=MASK_SEED)


class TestGradients:
    """Analytic gradients vs central finite differences (h=1e-4) with
    dropout masks pinned by a fixed seed."""

    def check_all_tensors(self, cfg, batch=None):
        ds, feats = micro_dataset()
        views = build_views(ds, feats, cfg)
        params = init_parameters(cfg, ds.num_users, ds.num_items, views.modality_dims)
        batch = batch or micro_batch()

        def loss_value() -> float:
            return forward(
                params, views, cfg, batch=batch, mode="train", rng=MASK_SEED
            ).total.item()

        result = forward(params, views, cfg, batch=batch, mode="train", rng=MASK_SEED)
        params.zero_grad()
        result.total.backward()
        for name, tensor in params.tensors().items():
            numeric = finite_difference(loss_value, tensor.data)
            if tensor.grad is None:
                assert np.abs(numeric).max() < 1e-8, name
                continue
            assert_grad_close(tensor.grad, numeric, name)

    def test_full_model_with_dropout_masks_fixed(self):
        self.check_all_tensors(micro_config())

    def test_bpr_only_configuration(self):
        self.check_all_tensors(
            micro_config(use_ii=False, use_hem=False, use_hc=False, use_ghc=False, layers=0)
        )

    def test_contrastive_only_weights(self):
        # exaggerate the contrastive weights so their paths dominate
        self.check_all_tensors(micro_config(lambda_hc=0.5, lambda_ghc=0.5, drop_rate=0.0))


class TestOptimizer:
    def test_zero_learning_rate_keeps_parameters(self, micro):
        ds, _, cfg, views = micro
        params = make_params(cfg, ds, views)
        before = {name: t.data.copy() for name, t in params.tensors().items()}
        optimizer = Adam(params.tensors(), learning_rate=0.0)
        result = forward(params, views, cfg, batch=micro_batch(), mode="train", rng=MASK_SEED)
        backward_and_step(result.total, params, optimizer)
        for name, t in params.tensors().items():
            assert np.array_equal(t.data, before[name]), name

    def test_parameters_stay_finite_over_100_steps(self, micro):
        ds, _, cfg, views = micro
        params = make_params(cfg, ds, views)
        optimizer = Adam(params.tensors(), cfg.learning_rate)
        rng = np.random.default_rng(0)
        batch = micro_batch()
        for _ in range(100):
            result = forward(params, views, cfg, batch=batch, mode="train", rng=rng)
            backward_and_step(result.total, params, optimizer)
        params.check_finite()

    def test_nan_gradients_raise(self, micro):
        ds, _, cfg, views = micro
        params = make_params(cfg, ds, views)
        params.e0.data[0, 0] = np.nan
        optimizer = Adam(params.tensors(), cfg.learning_rate)
        with np.errstate(invalid="ignore"):
            result = forward(params, views, cfg, batch=micro_batch(), mode="train", rng=MASK_SEED)
            with pytest.raises(NumericError):
                backward_and_step(result.total, params, optimizer)


class TestVariants:
    def test_labels(self):
        assert variant_label(TrainConfig()) == "MHCR"
        assert variant_label(apply_variant(TrainConfig(), "wo-hem")) == "w/o HEM"
        assert variant_label(apply_variant(TrainConfig(), "wo-ui")) == "w/o UI"
        assert variant_label(apply_variant(TrainConfig(), "bpr-mf")) == "BPR-MF"

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            apply_variant(TrainConfig(), "nope")

    def test_bpr_mf_scores_come_from_raw_id_embeddings(self, micro):
        ds, _, _, views = micro
        cfg = apply_variant(micro_config(), "bpr-mf")
        params = make_params(cfg, ds, views)
        result = forward(params, views, cfg, mode="eval")
        assert np.array_equal(result.fused.data, params.e0.data)


class TestFit:
    def test_deterministic_end_to_end(self, micro):
        ds, feats, _, _ = micro
        cfg = micro_config(max_epochs=3, patience=5)
        a = fit(ds, feats, cfg)
        b = fit(ds, feats, cfg)
        for (name, ta), tb in zip(a.params.tensors().items(), b.params.tensors().values()):
            assert np.array_equal(ta.data, tb.data), name
        assert [e.val_recall20 for e in a.epochs] == [e.val_recall20 for e in b.epochs]

    def test_patience_zero_stops_one_epoch_after_best(self, micro):
        # with 6 items every candidate is inside the top-20, so validation
        # recall saturates at epoch 1 and never strictly improves again
        ds, feats, _, _ = micro
        cfg = micro_config(max_epochs=10, patience=0)
        result = fit(ds, feats, cfg)
        assert result.best_epoch == 1
        assert len(result.epochs) == 2

    def test_max_epochs_bound(self, micro):
        ds, feats, _, _ = micro
        cfg = micro_config(max_epochs=1, patience=10)
        result = fit(ds, feats, cfg)
        assert len(result.epochs) == 1

    def test_learning_on_planted_clusters(self):
        cfg_data = SyntheticConfig(
            num_users=400,
            num_items=120,
            num_clusters=6,
            mean_interactions=8.0,
            modality_dims={"image": 12, "text": 8},
            seed=3,
        )
        ds, feats = generate_synthetic(cfg_data)
        ds = split_dataset(ds, seed=3)
        cfg = TrainConfig(
            d=16, k_hyper=8, k_knn=5, batch_size=256, max_epochs=8, patience=8, seed=3
        )
        result = fit(ds, feats, cfg)
        assert result.best_val_recall20 > result.initial_val_recall20

    def test_restores_best_parameters(self, micro):
        ds, feats, _, _ = micro
        cfg = micro_config(max_epochs=4, patience=10)
        result = fit(ds, feats, cfg)
        views = build_views(ds, feats, cfg)
        user_emb, item_emb = compute_embeddings(result.params, views, cfg)
        recall = evaluation.mean_recall(user_emb, item_emb, ds, k=20)
        assert recall == pytest.approx(result.best_val_recall20)

    def test_evaluate_params_matches_manual_pipeline(self, micro):
        ds, feats, _, _ = micro
        cfg = micro_config(max_epochs=2)
        result = fit(ds, feats, cfg)
        report = evaluate_params(result.params, ds, feats, cfg)
        views = build_views(ds, feats, cfg)
        user_emb, item_emb = compute_embeddings(result.params, views, cfg)
        manual = evaluation.evaluate(user_emb, item_emb, ds)
        for k in (10, 20):
            assert report.record("all", k).recall == manual.record("all", k).recall
            assert report.record("all", k).ndcg == manual.record("all", k).ndcg
