import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazeprompt.model import ModelConfig, build_model
from gazeprompt.personalize import (
    EvalReport,
    PersonalizeConfig,
    angular_error,
    evaluate,
    gaze_to_vector,
    person_error,
    personalize,
    personalize_and_evaluate,
)
from gazeprompt.synthgaze import PersonDataset, PersonSpec

angles = st.floats(-1.0, 1.0)


class TestGazeVector:
    def test_forward_gaze(self):
        np.testing.assert_allclose(gaze_to_vector(0.0, 0.0), [0, 0, -1], atol=0)

    def test_quarter_turn(self):
        np.testing.assert_allclose(gaze_to_vector(0.0, math.pi / 2), [-1, 0, 0], atol=1e-15)

    def test_unit_norm(self):
        rng = np.random.default_rng(0)
        v = gaze_to_vector(rng.uniform(-1, 1, 100), rng.uniform(-1, 1, 100))
        np.testing.assert_allclose(np.linalg.norm(v, axis=-1), 1.0, rtol=1e-15)


class TestAngularError:
    def test_identical(self):
        assert angular_error([0.1, 0.2], [0.1, 0.2]) == 0.0

    def test_orthogonal(self):
        assert angular_error([0.0, 0.0], [0.0, math.pi / 2]) == pytest.approx(90.0, abs=1e-12)

    def test_small_yaw_perturbation(self):
        a = (-math.cos(0.1) * math.sin(0.2), -math.sin(0.1), -math.cos(0.1) * math.cos(0.2))
        b = (-math.cos(0.1) * math.sin(0.201), -math.sin(0.1), -math.cos(0.1) * math.cos(0.201))
        by_hand = math.degrees(math.acos(sum(x * y for x, y in zip(a, b))))
        got = float(angular_error([0.1, 0.2], [0.1, 0.201]))
        assert got > 0
        assert got == pytest.approx(by_hand, rel=1e-6)
        # small-angle check: the yaw step is scaled by cos(pitch)
        assert got == pytest.approx(math.degrees(0.001 * math.cos(0.1)), rel=1e-4)

    @given(angles, angles, angles, angles)
    @settings(max_examples=100, deadline=None)
    def test_symmetric_nonnegative(self, p1, y1, p2, y2):
        ab, ba = angular_error([p1, y1], [p2, y2]), angular_error([p2, y2], [p1, y1])
        assert ab >= 0 and ab == pytest.approx(ba, abs=1e-9)

    def test_vectorized(self):
        pred = np.array([[0.0, 0.0], [0.0, math.pi / 2]])
        np.testing.assert_allclose(angular_error(pred, np.zeros((2, 2))), [0.0, 90.0], atol=1e-12)


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(num_images=0), dict(lr=0.0), dict(steps=-1), dict(strategy="all")])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            PersonalizeConfig(**bad).validate()

    def test_defaults(self):
        cfg = PersonalizeConfig()
        assert (cfg.num_images, cfg.lr, cfg.steps) == (5, 0.01, 50)
        assert PersonalizeConfig(strategy="update_all").effective_steps() == 5


@pytest.fixture
def meta_model():
    model = build_model(ModelConfig(), 0)
    rng = np.random.default_rng(0)
    model.prompts.assign([rng.standard_normal(a.shape).astype(np.float32) for a in model.prompts.arrays()])
    return model


class TestPersonalize:
    def test_zero_steps_returns_meta_prompt(self, meta_model, tiny_bench):
        adapted = personalize(meta_model, tiny_bench.targets[0], PersonalizeConfig(steps=0))
        for a, b in zip(adapted.prompts.arrays(), meta_model.prompts.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_prompt_only_freezes_theta(self, meta_model, tiny_bench):
        adapted = personalize(meta_model, tiny_bench.targets[0], PersonalizeConfig(steps=3))
        for k, t in meta_model.params.items():
            np.testing.assert_array_equal(adapted.params[k].data, t.data)
        assert any(not np.array_equal(a, b) for a, b in zip(adapted.prompts.arrays(), meta_model.prompts.arrays()))

    def test_input_model_untouched(self, meta_model, tiny_bench):
        before = {k: v.copy() for k, v in meta_model.state_arrays().items()}
        personalize(meta_model, tiny_bench.targets[0], PersonalizeConfig(steps=2, strategy="update_all",
                                                                          update_all_steps=2))
        for k, v in meta_model.state_arrays().items():
            np.testing.assert_array_equal(v, before[k])

    def test_update_all_moves_theta(self, meta_model, tiny_bench):
        adapted = personalize(meta_model, tiny_bench.targets[0],
                              PersonalizeConfig(strategy="update_all", update_all_steps=2))
        assert not np.array_equal(adapted.params["conv0.weight"].data, meta_model.params["conv0.weight"].data)

    def test_no_meta_reinitializes(self, meta_model, tiny_bench):
        adapted = personalize(meta_model, tiny_bench.targets[0], PersonalizeConfig(steps=0, strategy="no_meta_prompt"))
        flat = np.concatenate(adapted.prompts.arrays())
        assert not np.array_equal(flat, np.concatenate(meta_model.prompts.arrays()))

    def test_uses_only_first_k_images(self, meta_model, tiny_bench):
        person = tiny_bench.targets[0]
        scrambled = person.adapt_images.copy()
        scrambled[3:] = np.random.default_rng(1).random(scrambled[3:].shape)
        other = PersonDataset(person.person, scrambled, person.test_images, person.test_labels)
        cfg = PersonalizeConfig(num_images=3, steps=2)
        a, b = personalize(meta_model, person, cfg), personalize(meta_model, other, cfg)
        for x, y in zip(a.prompts.arrays(), b.prompts.arrays()):
            np.testing.assert_array_equal(x, y)

    def test_never_reads_adaptation_labels(self, meta_model, tiny_bench):
        person = tiny_bench.targets[0]
        blind = PersonDataset(person.person, person.adapt_images, person.test_images, person.test_labels,
                              _adapt_labels=None)
        a = personalize(meta_model, blind, PersonalizeConfig(steps=2))
        b = personalize(meta_model, person, PersonalizeConfig(steps=2))
        for x, y in zip(a.prompts.arrays(), b.prompts.arrays()):
            np.testing.assert_array_equal(x, y)

    def test_too_few_images_names_person(self, meta_model, tiny_bench):
        with pytest.raises(ValueError, match=tiny_bench.targets[1].person.person_id):
            personalize(meta_model, tiny_bench.targets[1], PersonalizeConfig(num_images=6))


class _Oracle:
    """Stands in for a perfect predictor: returns the test labels."""

    def __init__(self, labels):
        self.labels = labels


class TestEvaluate:
    def test_mean_is_average_of_person_means(self, meta_model, tiny_bench):
        report = evaluate(meta_model, tiny_bench.targets, seed=3)
        assert report.mean_error == pytest.approx(np.mean(report.person_errors))
        assert all(e >= 0 for e in report.person_errors)
        assert report.person_ids == [t.person.person_id for t in tiny_bench.targets]

    def test_perfect_predictor(self, monkeypatch, tiny_bench):
        import importlib

        pz = importlib.import_module("gazeprompt.personalize")
        monkeypatch.setattr(pz, "predict", lambda model, images: model.labels)
        errs = [pz.person_error(_Oracle(p.test_labels), p) for p in tiny_bench.targets]
        # arccos near 1 amplifies rounding to ~sqrt(eps) radians
        np.testing.assert_allclose(errs, 0.0, atol=1e-5)

    def test_empty_test_split(self, meta_model, tiny_bench):
        p = tiny_bench.targets[0]
        empty = PersonDataset(p.person, p.adapt_images, p.test_images[:0], p.test_labels[:0])
        with pytest.raises(ValueError, match="empty test split"):
            person_error(meta_model, empty)

    def test_deterministic(self, meta_model, tiny_bench):
        cfg = PersonalizeConfig(steps=2)
        a = personalize_and_evaluate(meta_model, tiny_bench.targets, cfg)
        b = personalize_and_evaluate(meta_model, tiny_bench.targets, cfg)
        assert a.person_errors == b.person_errors

    def test_report_files(self, tmp_path):
        report = EvalReport(["T000", "T001"], [1.5, 2.5], 2.0, {"num_images": 5, "strategy": "prompt_only"}, 0)
        report.save(tmp_path / "r")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "person_id,n_adapt,strategy,error_deg"
        assert lines[1] == "T000,5,prompt_only,1.5"
        summary = json.loads((tmp_path / "r.json").read_text())
        assert summary["mean_error_deg"] == 2.0 and summary["per_person"]["T001"] == 2.5


def test_person_spec_bounds():
    with pytest.raises(ValueError, match="iris_radius"):
        PersonSpec("x", iris_radius=20.0)


def _seed_mean(rows, strategy, n):
    return float(np.mean([r["error_deg"] for r in rows if r["strategy"] == strategy and r["n_samples"] == n]))


@pytest.mark.slow
class TestDeskBenchmark:
    def test_most_persons_improve_over_meta_prompt(self, desk_run):
        import importlib

        cli = importlib.import_module("gazeprompt.cli")
        cfg = cli.RunConfig(out=desk_run.out).seeded(0)
        model = cli._load_model(cfg, cli.meta_path(cfg))
        bench = cli._load_bench(cfg)
        before = evaluate(model, bench.targets).person_errors
        after = personalize_and_evaluate(model, bench.targets, cfg.personalize_cfg).person_errors
        improved = sum(a < b for a, b in zip(after, before))
        assert improved >= 0.7 * len(before), f"{improved}/{len(before)} persons improved"

    def test_tpgaze_beats_no_meta(self, desk_run):
        assert _seed_mean(desk_run.rows, "TPGaze", 5) <= _seed_mean(desk_run.rows, "No-Meta", 5)

    def test_tpgaze_beats_baseline(self, desk_run):
        assert _seed_mean(desk_run.rows, "TPGaze", 5) <= _seed_mean(desk_run.rows, "Baseline", 0)
