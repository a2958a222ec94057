"""Unit tests for the synthetic phantom generator."""
import numpy as np
import pytest
from pydantic import ValidationError

from trusfuse.errors import ConfigError
from trusfuse.metrics import auc
from trusfuse.phantom import LesionSpec, PhantomConfig, derive_sample_seed, generate_dataset, generate_sample
from trusfuse.videodata import load_manifest, load_sample


@pytest.fixture
def clean_config():
    """Low speckle and no distractors, so lesion cues are easy to measure."""
    return PhantomConfig(n_samples=4, dims=(8, 16, 16, 1), speckle_scale=0.05, distractor_rate=0.0)


@pytest.mark.unit
class TestSeeds:
    """Counter-based per-sample seeds."""

    def test_deterministic(self):
        """The same (master, index) gives the same seed."""
        assert derive_sample_seed(3, 10) == derive_sample_seed(3, 10)

    def test_distinct(self):
        """Neighbouring indices and masters give different seeds."""
        seeds = {derive_sample_seed(0, i) for i in range(100)} | {derive_sample_seed(1, 0)}
        assert len(seeds) == 101

    def test_negative_index(self):
        """Negative indices are rejected."""
        with pytest.raises(ConfigError):
            derive_sample_seed(0, -1)


@pytest.mark.unit
class TestPhantomConfig:
    """Config validation."""

    def test_positive_fraction_range(self):
        """positive_fraction must lie in (0, 1)."""
        with pytest.raises(ValidationError):
            PhantomConfig(positive_fraction=1.0)

    def test_unknown_key(self):
        """Unknown keys are rejected."""
        with pytest.raises(ValidationError):
            PhantomConfig(n_sample=4)

    def test_n_positive_rounds_half_up(self):
        """5 samples at 50% give 3 positives."""
        assert PhantomConfig(n_samples=5, positive_fraction=0.5).n_positive == 3

    def test_n_positive_at_training_prevalence(self):
        """200 samples at 271/400 give 136 positives."""
        assert PhantomConfig(n_samples=200, positive_fraction=271 / 400).n_positive == 136

    def test_lesion_kinds(self):
        """True lesions carry both cues; distractors exactly one."""
        kinds = {k: LesionSpec((0, 0, 0), (1, 1, 1), k) for k in
                 ("true_lesion", "bmode_only_distractor", "swe_only_distractor")}
        assert kinds["true_lesion"].darkens_bmode and kinds["true_lesion"].stiffens_swe
        assert kinds["bmode_only_distractor"].darkens_bmode and not kinds["bmode_only_distractor"].stiffens_swe
        assert kinds["swe_only_distractor"].stiffens_swe and not kinds["swe_only_distractor"].darkens_bmode


@pytest.mark.unit
class TestGenerateSample:
    """Single-sample generation."""

    def test_reproducible(self, clean_config):
        """The same seed gives identical arrays."""
        a = generate_sample(clean_config, 123, 1)
        b = generate_sample(clean_config, 123, 1)
        np.testing.assert_array_equal(a.bmode, b.bmode)
        np.testing.assert_array_equal(a.swe, b.swe)
        np.testing.assert_array_equal(a.lesion_mask, b.lesion_mask)

    def test_shapes_and_range(self, clean_config):
        """Videos match dims, are float32 and lie in [0, 1]."""
        sample = generate_sample(clean_config, 5, 1)
        assert sample.bmode.shape == (8, 16, 16, 1)
        assert sample.bmode.dtype == np.float32
        for video in (sample.bmode, sample.swe):
            assert video.min() >= 0.0 and video.max() <= 1.0

    @pytest.mark.parametrize("seed", range(10))
    def test_positive_has_both_cues(self, seed):
        """At contrast 0.4 the lesion B-mode mean is at most 0.75x and the SWE mean at least 1.25x the background."""
        config = PhantomConfig(dims=(8, 16, 16, 1), bmode_contrast=0.4, distractor_rate=0.0)
        sample = generate_sample(config, seed, 1)
        mask = sample.lesion_mask.astype(bool)
        assert mask.any()
        assert sample.bmode[..., 0][mask].mean() <= 0.75 * sample.bmode[..., 0][~mask].mean()
        assert sample.swe[..., 0][mask].mean() >= 1.25 * sample.swe[..., 0][~mask].mean()

    def test_negative_has_empty_mask(self, clean_config):
        """Negatives never carry a lesion mask voxel."""
        assert not generate_sample(clean_config, 9, 0).lesion_mask.any()

    def test_distractors_never_masked(self):
        """Distractors add no mask voxels, even when forced into every sample."""
        config = PhantomConfig(dims=(8, 16, 16, 1), speckle_scale=0.05, distractor_rate=1.0)
        for seed in range(5):
            assert not generate_sample(config, seed, 0).lesion_mask.any()
            assert generate_sample(config, seed, 1).lesion_mask.any()

    def test_geometry_check(self):
        """Radii that cannot fit in the frame are rejected."""
        config = PhantomConfig(dims=(8, 16, 16, 1), lesion_radius_range=(0.45, 0.5))
        with pytest.raises(ConfigError, match="does not fit"):
            generate_sample(config, 0, 1)

    def test_label_range(self, clean_config):
        """Labels other than 0/1 are rejected."""
        with pytest.raises(ConfigError):
            generate_sample(clean_config, 0, 2)


@pytest.mark.unit
class TestGenerateDataset:
    """Dataset generation and persistence."""

    def test_counts_and_files(self, temp_dir, tiny_phantom_config):
        """Label counts follow positive_fraction and every file exists."""
        manifest = generate_dataset(tiny_phantom_config, temp_dir)
        assert manifest.label_counts == {"0": 4, "1": 4}
        assert manifest.missing_files() == []
        loaded = load_manifest(temp_dir / "manifest.json")
        assert loaded.ids == [f"case_{i:05d}" for i in range(8)]

    def test_positives_have_masks(self, temp_dir, tiny_phantom_config):
        """Every positive sample stores a non-empty mask."""
        manifest = generate_dataset(tiny_phantom_config, temp_dir)
        for entry in manifest.entries:
            sample = load_sample(temp_dir / f"{entry.id}.sample.json")
            assert bool(sample.lesion_mask.any()) == (entry.label == 1)

    def test_rerun_is_byte_identical(self, temp_dir, tiny_phantom_config):
        """Two runs with the same config write identical files."""
        generate_dataset(tiny_phantom_config, temp_dir / "a")
        generate_dataset(tiny_phantom_config, temp_dir / "b")
        names = sorted(p.name for p in (temp_dir / "a").iterdir())
        assert names == sorted(p.name for p in (temp_dir / "b").iterdir())
        for name in names:
            assert (temp_dir / "a" / name).read_bytes() == (temp_dir / "b" / name).read_bytes()


@pytest.mark.unit
class TestSingleCueSeparability:
    """With a distractor in every sample neither modality alone gives the label away."""

    def test_mean_intensity_is_weak(self):
        """Whole-video mean intensity of either modality stays far from a perfect ranking."""
        config = PhantomConfig(n_samples=160, distractor_rate=1.0)
        labels, bmode_scores, swe_scores = [], [], []
        for index in range(config.n_samples):
            label = 1 if index < config.n_positive else 0
            sample = generate_sample(config, derive_sample_seed(config.master_seed, index), label)
            labels.append(label)
            bmode_scores.append(-float(sample.bmode.mean()))
            swe_scores.append(float(sample.swe.mean()))
        assert auc(bmode_scores, labels) <= 0.85
        assert auc(swe_scores, labels) <= 0.85
