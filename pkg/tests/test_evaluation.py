import numpy as np
import pytest

from conftest import channel_zero_net, constant_net
from localnoise.attacks.patch_attack import Patch, PatchLocation, apply_patch
from localnoise.diffnet.dataset import Dataset, synth_dataset
from localnoise.diffnet.network import forward, predict, softmax
from localnoise.errors import ConfigError, DatasetSplitError
from localnoise.evaluation import (
    class_matrix,
    context_transfer,
    evaluate_cell,
    images_by_prediction,
    location_robustness,
    location_sweep,
    shift_sensitivity,
    transfer_eval,
)
from localnoise.pipeline.engines.sequential_engine import SequentialEvalEngine
from localnoise.pipeline.engines.thread_engine import ThreadEvalEngine
from localnoise.pipeline.schemas import NoiseDomain


@pytest.fixture
def network_patch(rng):
    return Patch(values=rng.normal(0.0, 3.0, size=(5, 5, 3)).astype(np.float32), domain=NoiseDomain.NETWORK)


@pytest.fixture
def heldout_set():
    return synth_dataset(seed=6, n_per_class=4, num_classes=3, image_size=16, split="heldout")


class TestLocationSweep:
    def test_default_grid_is_14_by_14(self, wide_net, image32, network_patch):
        report = location_sweep(wide_net, image32, network_patch, target=1)
        assert report.shape == (14, 14)
        assert report.rows == list(range(0, 28, 2))
        assert len(report.to_frame()) == 196

    def test_cells_match_independent_composition(self, wide_net, image32, network_patch, rng):
        report = location_sweep(wide_net, image32, network_patch, target=2)
        for _ in range(50):
            i, j = int(rng.integers(14)), int(rng.integers(14))
            loc = PatchLocation(row=report.rows[i], col=report.cols[j])
            probs = softmax(forward(wide_net, apply_patch(image32, network_patch, loc)))
            assert report.target_prob[i, j] == float(probs[2])
            assert report.source_prob[i, j] == float(probs[report.source])
            assert report.argmax[i, j] == int(np.argmax(probs))

    def test_patch_equal_to_region_keeps_clean_prediction(self, wide_net, image32):
        patch = Patch(values=image32[6:11, 10:15].copy(), domain=NoiseDomain.IMAGE)
        report = location_sweep(wide_net, image32, patch, target=0)
        clean, _ = predict(wide_net, image32)
        assert report.argmax[3, 5] == clean

    def test_boolean_maps_agree_with_argmax(self, wide_net, image32, network_patch):
        clean, _ = predict(wide_net, image32)
        report = location_sweep(wide_net, image32, network_patch, target=(clean + 1) % 3, stride=3)
        total = report.argmax_is_target.astype(int) + report.argmax_is_source + report.argmax_is_neither
        assert np.all(total == 1)
        maps = report.maps(wide_net.num_classes)
        assert len(maps) == 6
        assert all(m.min() >= 0.0 and m.max() <= 1.0 for m in maps.values())

    def test_threads_match_sequential(self, wide_net, image32, network_patch):
        sequential = location_sweep(wide_net, image32, network_patch, 1, engine=SequentialEvalEngine())
        threaded = location_sweep(wide_net, image32, network_patch, 1, engine=ThreadEvalEngine(workers=4))
        assert np.array_equal(sequential.probs, threaded.probs)

    def test_stride_below_one_rejected(self, wide_net, image32, network_patch):
        with pytest.raises(ConfigError):
            location_sweep(wide_net, image32, network_patch, 1, stride=0)


class TestLocationRobustness:
    def test_fractions_match_recount(self, wide_net, image32, network_patch):
        clean, _ = predict(wide_net, image32)
        report = location_sweep(wide_net, image32, network_patch, target=(clean + 1) % 3)
        confident, not_source = location_robustness(report)
        assert confident == np.count_nonzero(report.target_prob >= 0.9) / 196
        assert not_source == np.count_nonzero(report.argmax != report.source) / 196
        assert not_source >= confident

    def test_ineffective_patch_scores_zero(self, image32):
        net = channel_zero_net(input_shape=(32, 32, 3), slope=0.0)
        patch = Patch(values=np.zeros((5, 5, 3), dtype=np.float32), domain=NoiseDomain.NETWORK)
        report = location_sweep(net, image32, patch, target=1)
        assert location_robustness(report) == (0.0, 0.0)


class TestTransferEval:
    def test_rates_match_records(self, small_net, heldout_set, network_patch):
        report = transfer_eval(small_net, heldout_set, network_patch, target=0)
        counted = [r for r in report.records if not r.excluded]
        assert report.evaluated == len(counted)
        assert report.excluded == len(report.records) - len(counted)
        if counted:
            assert report.rate_confident == sum(r.confident for r in counted) / len(counted)
            assert report.rate_argmax_target == sum(r.argmax_target for r in counted) / len(counted)
            assert report.rate_not_source == sum(r.not_source for r in counted) / len(counted)
        assert report.rate_confident <= report.rate_argmax_target <= report.rate_not_source

    def test_tiers_nest_per_record(self, small_net, heldout_set, network_patch):
        report = transfer_eval(small_net, heldout_set, network_patch, target=1)
        for record in report.records:
            assert not record.confident or record.argmax_target
            assert not record.argmax_target or record.not_source

    def test_default_location_is_bottom_right(self, small_net, heldout_set, network_patch):
        report = transfer_eval(small_net, heldout_set, network_patch, target=1)
        assert (report.location.row, report.location.col) == (11, 11)
        record = report.records[0]
        probs = evaluate_cell(small_net, heldout_set.images[0], network_patch, PatchLocation(row=11, col=11))
        assert record.target_prob == float(probs[1])

    def test_strong_patch_flips_everything(self):
        net = channel_zero_net()
        images = np.full((5, 16, 16, 3), 0.5, dtype=np.float32)
        heldout = Dataset(images=images, labels=np.zeros(5, dtype=np.int64), split="heldout", num_classes=2)
        strong = Patch(values=np.full((5, 5, 3), 1000.0, dtype=np.float32), domain=NoiseDomain.NETWORK)
        report = transfer_eval(net, heldout, strong, target=1)
        assert (report.rate_confident, report.rate_argmax_target, report.rate_not_source) == (1.0, 1.0, 1.0)
        assert report.reference_rates == (0.43, 0.89, 1.0)

    def test_training_split_rejected(self, small_net, network_patch):
        train = synth_dataset(seed=6, n_per_class=1, num_classes=3, image_size=16, split="train")
        with pytest.raises(DatasetSplitError):
            transfer_eval(small_net, train, network_patch, target=0)


class TestClassMatrix:
    def test_single_image_cells_and_absent_columns(self, small_net, heldout_set, network_patch):
        loc = PatchLocation(row=0, col=0)
        images_by_class = {0: heldout_set.images[:1], 1: heldout_set.images[1:2], 2: heldout_set.images[2:3]}
        matrix = class_matrix(
            small_net, images_by_class, {0: network_patch, 2: network_patch}, loc, targets=range(3)
        )
        assert matrix.values.shape == (3, 3)
        assert np.all(np.isnan(matrix.values[:, 1]))
        assert not matrix.present[:, 1].any()
        for i in range(3):
            for j in (0, 2):
                expected = float(evaluate_cell(small_net, images_by_class[i][0], network_patch, loc)[j])
                assert matrix.values[i, j] == expected
        present = matrix.values[matrix.present]
        assert present.min() >= 0.0 and present.max() <= 1.0

    def test_missing_source_class_is_absent(self, small_net, heldout_set, network_patch):
        matrix = class_matrix(small_net, {0: heldout_set.images[:2]}, {1: network_patch}, sources=[0, 1])
        assert not np.isnan(matrix.values[0, 0])
        assert np.isnan(matrix.values[1, 0])
        assert matrix.counts[0, 0] == 2
        assert list(matrix.to_frame().columns) == ["source", "target_1"]

    def test_rows_follow_the_clean_prediction(self):
        net = channel_zero_net()
        images = np.full((4, 16, 16, 3), 0.5, dtype=np.float32)
        # channel 0 at 10 pushes class 1 past the constant class-0 logit
        images[[1, 3], :, :, 0] = 10.0
        groups = images_by_prediction(net, images)
        assert sorted(groups) == [0, 1]
        assert np.array_equal(groups[0], images[[0, 2]])
        assert np.array_equal(groups[1], images[[1, 3]])

    def test_never_predicted_source_stays_absent(self, network_patch):
        net = constant_net([1.0, 0.0])
        images = np.random.default_rng(3).uniform(0, 1, size=(4, 16, 16, 3)).astype(np.float32)
        groups = images_by_prediction(net, images)
        assert list(groups) == [0]
        matrix = class_matrix(net, groups, {1: network_patch}, sources=range(2))
        assert matrix.counts[0, 0] == 4
        assert np.isnan(matrix.values[1, 0])


class TestShiftAndContext:
    def test_shift_offsets_stay_in_bounds(self, small_net, image16, network_patch):
        corner = shift_sensitivity(small_net, image16, network_patch, PatchLocation(row=0, col=0), target=1)
        assert len(corner) == 4
        inner = shift_sensitivity(small_net, image16, network_patch, PatchLocation(row=5, col=5), target=1)
        assert len(inner) == 9
        centre = inner[(inner.d_row == 0) & (inner.d_col == 0)].iloc[0]
        probs = evaluate_cell(small_net, image16, network_patch, PatchLocation(row=5, col=5))
        assert centre.target_prob == float(probs[1])

    def test_context_border_and_self_transfer(self, small_net, image16, network_patch):
        loc = PatchLocation(row=4, col=4)
        result = context_transfer(small_net, image16, image16, network_patch, loc, target=2)
        assert result.border == 2
        probs = evaluate_cell(small_net, image16, network_patch, loc)
        assert result.predicted == int(np.argmax(probs))
        assert result.target_prob == float(probs[2])
