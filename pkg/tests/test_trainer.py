import csv
import math

import numpy as np
import pytest
import torch

from conftest import make_tiny_model, sample_corpus_points
from patchseg.data import SyntheticCorpusSpec, generate_corpus
from patchseg.model import load_checkpoint
from patchseg.trainer import (
    LOSS_COLUMNS,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    derive_seed,
    subsample_annotations,
    train,
)
from patchseg.inference import evaluate_split


def quick_cfg(**overrides):
    base = dict(
        iterations=12,
        batch_images=3,
        points_per_image=64,
        val_every=6,
        val_images=2,
        log_every=1,
        seed=5,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_smoke_outputs(self, tiny_corpus, tmp_path):
        model = make_tiny_model(seed=1)
        result = train(tiny_corpus, model, quick_cfg(), tmp_path / "run")
        assert result.best_path.exists() and result.last_path.exists()
        assert result.best_path.with_suffix(".json").exists()
        with result.losses_path.open() as f:
            rows = list(csv.DictReader(f))
        assert rows and list(rows[0]) == LOSS_COLUMNS
        assert all(math.isfinite(float(r["L_total"])) for r in rows)
        with result.val_path.open() as f:
            val_rows = list(csv.DictReader(f))
        assert val_rows and 0.0 <= float(val_rows[-1]["val_dice"]) <= 1.0

    def test_checkpoint_round_trips_validation_dice(self, tiny_corpus, tmp_path):
        model = make_tiny_model(seed=2)
        result = train(tiny_corpus, model, quick_cfg(iterations=8), tmp_path / "run")
        loaded, meta = load_checkpoint(result.best_path)
        ids = tiny_corpus.ids("val")[:2]
        a = evaluate_split(loaded, tiny_corpus, "val", image_ids=ids)
        loaded2, _ = load_checkpoint(result.best_path)
        b = evaluate_split(loaded2, tiny_corpus, "val", image_ids=ids)
        for (_, ra), (_, rb) in zip(a, b):
            assert abs(ra.foreground_mean - rb.foreground_mean) <= 1e-9
        assert meta["val_dice"] is not None

    def test_bitwise_deterministic_loss_log(self, tiny_corpus, tmp_path):
        outs = []
        for name in ("a", "b"):
            model = make_tiny_model(seed=7)
            result = train(
                tiny_corpus, model, quick_cfg(iterations=20, deterministic=True), tmp_path / name
            )
            outs.append(result.losses_path.read_bytes())
        assert outs[0] == outs[1]

    def test_seed_changes_trajectory(self, tiny_corpus, tmp_path):
        logs = []
        for seed in (1, 2):
            model = make_tiny_model(seed=seed)
            result = train(tiny_corpus, model, quick_cfg(seed=seed), tmp_path / f"s{seed}")
            logs.append(result.losses_path.read_text())
        assert logs[0] != logs[1]

    def test_dry_run_writes_initial_checkpoint_without_updates(self, tiny_corpus, tmp_path):
        model = make_tiny_model(seed=3)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        result = train(tiny_corpus, model, quick_cfg(dry_run=True), tmp_path / "dry")
        assert result.best_path.exists()
        for k, v in model.state_dict().items():
            assert torch.equal(before[k], v)
        loaded, meta = load_checkpoint(result.best_path)
        assert meta["iteration"] == 0

    def test_nan_aborts_with_breakdown(self, tiny_corpus, tmp_path):
        model = make_tiny_model(seed=4)
        with torch.no_grad():
            model.patch_decoder.mlp.out.weight.fill_(float("nan"))
        with pytest.raises(TrainingDiverged, match="step 0"):
            train(tiny_corpus, model, quick_cfg(), tmp_path / "nan")

    def test_missing_point_file_skipped_with_report(self, tmp_path):
        manifest = generate_corpus(SyntheticCorpusSpec(n_images=6, size=64, seed=21), tmp_path / "c")
        sample_corpus_points(manifest, n_background=80, n_foreground=60)
        victim = manifest.ids("train")[0]
        manifest.points_path(victim).unlink()
        model = make_tiny_model(seed=6)
        result = train(manifest, model, quick_cfg(iterations=4, batch_images=2), tmp_path / "run")
        assert victim in result.skipped_images

    def test_loss_decreases_on_tiny_run(self, tiny_corpus, tmp_path):
        model = make_tiny_model(seed=8)
        result = train(
            tiny_corpus,
            model,
            quick_cfg(iterations=120, batch_images=4, points_per_image=128, val_every=60, log_every=1),
            tmp_path / "run",
        )
        with result.losses_path.open() as f:
            losses = [float(r["L_total"]) for r in csv.DictReader(f)]
        head = np.median(losses[:15])
        tail = np.median(losses[-15:])
        assert tail < head

    def test_overreach_off_matches_param_count(self, tiny_corpus, tmp_path):
        m_on = make_tiny_model(seed=9)
        m_off = make_tiny_model(seed=9)
        n_on = sum(p.numel() for p in m_on.parameters())
        train(tiny_corpus, m_off, quick_cfg(iterations=2, overreach_count=0), tmp_path / "off")
        assert sum(p.numel() for p in m_off.parameters()) == n_on


class TestSubsampleAnnotations:
    def test_identity_fraction(self, tiny_corpus):
        view = subsample_annotations(tiny_corpus, 1.0, seed=0)
        assert view.splits == tiny_corpus.splits

    def test_fraction_arithmetic_and_stability(self, tiny_corpus):
        view = subsample_annotations(tiny_corpus, 0.5, seed=3)
        assert len(view.splits["train"]) == 3  # floor(0.5 * 6)
        assert view.splits["val"] == tiny_corpus.splits["val"]
        assert view.splits["test"] == tiny_corpus.splits["test"]
        again = subsample_annotations(tiny_corpus, 0.5, seed=3)
        assert view.splits["train"] == again.splits["train"]

    def test_nested_subsets_under_same_seed(self, tiny_corpus):
        small = set(subsample_annotations(tiny_corpus, 1 / 6, seed=4).splits["train"])
        large = set(subsample_annotations(tiny_corpus, 3 / 6, seed=4).splits["train"])
        assert small <= large

    def test_zero_images_rejected(self, tiny_corpus):
        with pytest.raises(ValueError):
            subsample_annotations(tiny_corpus, 0.01, seed=0)
        with pytest.raises(ValueError):
            subsample_annotations(tiny_corpus, 0.0, seed=0)


class TestDeriveSeed:
    def test_stable_and_distinct(self):
        assert derive_seed(3, "batches") == derive_seed(3, "batches")
        assert derive_seed(3, "batches") != derive_seed(3, "points")
        assert derive_seed(3, "batches") != derive_seed(4, "batches")
