import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazeprompt.model import load_checkpoint
from gazeprompt.personalize import angular_error
from gazeprompt.synthgaze import (
    IMAGE_SIZE,
    SOURCE_DOMAIN,
    TARGET_DOMAIN,
    DomainSpec,
    PersonSpec,
    load_dataset,
    make_benchmark,
    render,
    sample_source_person,
    sample_target_person,
    save_dataset,
    split_source,
)
from gazeprompt.training import predict

CENTER = (IMAGE_SIZE - 1) / 2.0


def mirror_check_draws(n=200, seed=0):
    """(person, domain, gaze) with zero yaw bias and noise off; blur and contrast allowed."""
    rng = np.random.default_rng(seed)
    for i in range(n):
        bias_p = rng.uniform(-0.04, 0.04)
        person = PersonSpec(f"P{i}", eye_aspect=rng.uniform(0.4, 0.7), iris_radius=rng.uniform(4, 6),
                            pupil_scale=rng.uniform(0.8, 1.2), base_intensity=rng.uniform(0.6, 0.95),
                            gaze_bias=(bias_p, 0.0))
        domain = DomainSpec(rng.uniform(-0.1, 0.1), rng.uniform(0.7, 1.2), 0.0, rng.choice([0.0, 0.5, 1.0]))
        yield person, domain, (rng.uniform(-0.35, 0.35), rng.uniform(-0.5, 0.5))


class TestRender:
    def test_shape_dtype_range(self):
        img = render(PersonSpec("a"), TARGET_DOMAIN, (0.1, -0.2), 3)
        assert img.shape == (1, IMAGE_SIZE, IMAGE_SIZE) and img.dtype == np.float32
        assert img.min() >= 0 and img.max() <= 1

    def test_flip_equivariance_bit_exact(self):
        for person, domain, (p, y) in mirror_check_draws():
            a = render(person, domain, (p, y), 0)
            b = render(person, domain, (p, -y), 0)
            np.testing.assert_array_equal(a[..., ::-1], b)

    @pytest.mark.parametrize("person", [PersonSpec("a"), PersonSpec("b", eye_aspect=0.6, iris_radius=5.5)])
    def test_pupil_centered_at_zero_gaze(self, person):
        img = render(person, SOURCE_DOMAIN.without_noise(), (0.0, 0.0), 0)[0].astype(np.float64)
        dark = np.clip(0.2 - img, 0, None)
        ys, xs = np.indices(img.shape)
        cy, cx = (dark * ys).sum() / dark.sum(), (dark * xs).sum() / dark.sum()
        assert abs(cx - CENTER) <= 0.5 and abs(cy - CENTER) <= 0.5

    def test_yaw_moves_pupil_right(self):
        img = render(PersonSpec("a"), SOURCE_DOMAIN.without_noise(), (0.0, 0.4), 0)[0]
        dark = np.clip(0.2 - img, 0, None)
        assert (dark * np.arange(IMAGE_SIZE)).sum() / dark.sum() > CENTER + 1

    def test_seed_determinism(self):
        a = render(PersonSpec("a"), TARGET_DOMAIN, (0.1, 0.1), 11)
        np.testing.assert_array_equal(a, render(PersonSpec("a"), TARGET_DOMAIN, (0.1, 0.1), 11))
        assert not np.array_equal(a, render(PersonSpec("a"), TARGET_DOMAIN, (0.1, 0.1), 12))

    @pytest.mark.parametrize("gaze", [(1.2, 0.0), (0.0, -1.1)])
    def test_gaze_out_of_range(self, gaze):
        with pytest.raises(ValueError, match="outside"):
            render(PersonSpec("a"), SOURCE_DOMAIN, gaze, 0)


class TestSpecs:
    @pytest.mark.parametrize("bad", [dict(eye_aspect=0.1), dict(pupil_scale=2.0), dict(base_intensity=0.1),
                                     dict(gaze_bias=(0.3, 0.0))])
    def test_person_bounds(self, bad):
        with pytest.raises(ValueError):
            PersonSpec("x", **bad)

    @pytest.mark.parametrize("bad", [dict(additive_noise_sigma=-1), dict(contrast_scale=0), dict(blur_radius=-1)])
    def test_domain_bounds(self, bad):
        with pytest.raises(ValueError):
            DomainSpec(**bad)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_sampled_persons_valid(self, seed):
        rng = np.random.default_rng(seed)
        assert sample_source_person(rng, "s").gaze_bias == (0.0, 0.0)
        bias = sample_target_person(rng, "t").gaze_bias
        assert all(0.01 <= abs(b) <= 0.04 for b in bias)


class TestBenchmark:
    def test_layout(self, tiny_bench):
        assert len(tiny_bench.source) == 32
        assert tiny_bench.source.labels.shape == (32, 2)
        assert [len(t.adapt_images) for t in tiny_bench.targets] == [5, 5]
        assert [len(t.test_labels) for t in tiny_bench.targets] == [6, 6]
        np.testing.assert_array_equal(np.bincount(tiny_bench.source.person_index), [16, 16])

    def test_same_seed_same_data(self, tiny_bench):
        again = make_benchmark(2, 16, 2, seed=7, n_adapt=5, n_test=6)
        np.testing.assert_array_equal(again.source.images, tiny_bench.source.images)
        np.testing.assert_array_equal(again.targets[1].test_images, tiny_bench.targets[1].test_images)

    def test_first_k_is_prefix(self, tiny_bench):
        t = tiny_bench.targets[0]
        np.testing.assert_array_equal(t.first_k(3), t.adapt_images[:3])
        assert len(t.first_k(5)) == 5

    @pytest.mark.parametrize("k", [0, -1])
    def test_first_k_rejects_nonpositive(self, tiny_bench, k):
        with pytest.raises(ValueError, match=">= 1"):
            tiny_bench.targets[0].first_k(k)

    def test_first_k_too_many_names_person(self, tiny_bench):
        with pytest.raises(ValueError, match="person T000"):
            tiny_bench.targets[0].first_k(6)

    def test_empty_request_rejected(self):
        with pytest.raises(ValueError, match="n_source_persons"):
            make_benchmark(n_source_persons=0)

    def test_split_source_partitions(self, tiny_bench):
        tr, val = split_source(tiny_bench.source, 0.25, 0)
        assert len(tr) + len(val) == len(tiny_bench.source) and len(val) == 8


class TestPersistence:
    def test_round_trip(self, tiny_bench, tmp_path):
        save_dataset(tiny_bench, tmp_path / "b")
        back = load_dataset(tmp_path / "b")
        np.testing.assert_array_equal(back.source.images, tiny_bench.source.images)
        np.testing.assert_array_equal(back.source.person_index, tiny_bench.source.person_index)
        for a, b in zip(back.targets, tiny_bench.targets):
            assert a.person == b.person
            np.testing.assert_array_equal(a.test_labels, b.test_labels)
            np.testing.assert_array_equal(a._adapt_labels, b._adapt_labels)
        assert back.target_domain == tiny_bench.target_domain and back.seed == 7

    def test_byte_identical_for_same_seed(self, tiny_bench, tmp_path):
        save_dataset(tiny_bench, tmp_path / "a")
        save_dataset(make_benchmark(2, 16, 2, seed=7, n_adapt=5, n_test=6), tmp_path / "b")
        for ext in (".json", ".bin"):
            assert (tmp_path / f"a{ext}").read_bytes() == (tmp_path / f"b{ext}").read_bytes()

    def test_truncated_blob(self, tiny_bench, tmp_path):
        save_dataset(tiny_bench, tmp_path / "b")
        blob = (tmp_path / "b.bin").read_bytes()
        (tmp_path / "b.bin").write_bytes(blob[:-4])
        with pytest.raises(ValueError, match="size mismatch"):
            load_dataset(tmp_path / "b")

    def test_wrong_count(self, tiny_bench, tmp_path):
        save_dataset(tiny_bench, tmp_path / "b")
        m = json.loads((tmp_path / "b.json").read_text())
        m["counts"]["source"] = 31
        (tmp_path / "b.json").write_text(json.dumps(m))
        with pytest.raises(ValueError, match="size mismatch"):
            load_dataset(tmp_path / "b")

    def test_version_mismatch(self, tiny_bench, tmp_path):
        save_dataset(tiny_bench, tmp_path / "b")
        m = json.loads((tmp_path / "b.json").read_text())
        m["format_version"] = 99
        (tmp_path / "b.json").write_text(json.dumps(m))
        with pytest.raises(ValueError, match="format_version"):
            load_dataset(tmp_path / "b")

    def test_missing_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "none")


@pytest.mark.slow
def test_domain_gap_on_desk_model(desk_run):
    root = Path(desk_run.out) / "seed0"
    model = load_checkpoint(root / "pretrain" / "model")
    bench = load_dataset(root / "data" / "bench")
    # unseen source-style persons versus the target persons
    held_out = make_benchmark(5, 40, 1, seed=1234, n_adapt=1, n_test=1).source
    src_err = angular_error(predict(model, held_out.images), held_out.labels).mean()
    tgt_err = np.mean([angular_error(predict(model, t.test_images), t.test_labels).mean() for t in bench.targets])
    assert tgt_err > src_err
