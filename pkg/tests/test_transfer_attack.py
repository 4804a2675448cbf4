import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import channel_zero_net
from localnoise.attacks.patch_attack import Patch
from localnoise.attacks.transfer_attack import sample_location, train_transfer_patch
from localnoise.diffnet.dataset import Dataset, synth_dataset
from localnoise.diffnet.network import predict
from localnoise.errors import AttackError, DatasetSplitError, ShapeMismatchError
from localnoise.pipeline.schemas import NoiseDomain, TransferConfig


class TestSampleLocation:
    def test_single_valid_position(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            loc = sample_location(5, 5, 5, rng)
            assert (loc.row, loc.col) == (0, 0)

    def test_never_out_of_bounds(self):
        rng = np.random.default_rng(1)
        for _ in range(10_000):
            loc = sample_location(32, 24, 5, rng)
            assert 0 <= loc.row <= 27 and 0 <= loc.col <= 19

    def test_uniform_over_positions(self):
        rng = np.random.default_rng(2)
        counts = np.zeros((10, 10))
        for _ in range(10_000):
            loc = sample_location(14, 14, 5, rng)
            counts[loc.row, loc.col] += 1
        assert chisquare(counts.ravel()).pvalue > 0.01

    def test_too_large_rejected(self):
        with pytest.raises(ShapeMismatchError):
            sample_location(4, 4, 5, np.random.default_rng(0))


class TestTrainTransferPatch:
    def test_already_effective_patch_converges_in_one_step(self, flat_train_set):
        net = channel_zero_net()
        strong = Patch(values=np.full((5, 5, 3), 1000.0, dtype=np.float32), domain=NoiseDomain.NETWORK)
        cfg = TransferConfig(consecutive_successes=1, train_image_count=1)
        result = train_transfer_patch(net, flat_train_set, 1, NoiseDomain.NETWORK, cfg, initial_patch=strong)
        assert result.converged
        assert result.iterations == 1
        assert result.training_images == 1

    def test_patch_follows_network_precision(self, flat_train_set):
        net = channel_zero_net().astype(np.float64)
        cfg = TransferConfig(max_total_iterations=3)
        result = train_transfer_patch(net, flat_train_set, 1, NoiseDomain.NETWORK, cfg)
        assert result.patch.values.dtype == np.float64

    def test_iteration_cap_flags_non_convergence(self, flat_train_set):
        net = channel_zero_net()
        cfg = TransferConfig(step_size=0.0, max_total_iterations=7)
        result = train_transfer_patch(net, flat_train_set, 1, NoiseDomain.NETWORK, cfg)
        assert not result.converged
        assert result.iterations == 7
        assert result.sidecar().converged is False

    def test_same_seed_same_patch(self, small_net):
        data = synth_dataset(seed=1, n_per_class=3, num_classes=3, image_size=16)
        target = (predict(small_net, data.images[0])[0] + 1) % 3
        cfg = TransferConfig(max_total_iterations=25, seed=8)
        first = train_transfer_patch(small_net, data, target, NoiseDomain.IMAGE, cfg)
        second = train_transfer_patch(small_net, data, target, NoiseDomain.IMAGE, cfg)
        assert np.array_equal(first.patch.values, second.patch.values)
        assert first.iterations == second.iterations
        assert first.patch.values.min() >= 0.0 and first.patch.values.max() <= 1.0

    def test_images_already_in_target_are_filtered(self, flat_train_set):
        # every flat image is class 0 under this net, so target 0 leaves nothing to train on
        with pytest.raises(AttackError):
            train_transfer_patch(channel_zero_net(), flat_train_set, 0, NoiseDomain.NETWORK, TransferConfig())

    def test_heldout_split_rejected(self, flat_train_set):
        heldout = Dataset(
            images=flat_train_set.images,
            labels=flat_train_set.labels,
            split="heldout",
            num_classes=2,
        )
        with pytest.raises(DatasetSplitError):
            train_transfer_patch(channel_zero_net(), heldout, 1, NoiseDomain.NETWORK)

    def test_empty_training_set_rejected(self):
        empty = Dataset(
            images=np.zeros((0, 16, 16, 3), dtype=np.float32),
            labels=np.zeros(0, dtype=np.int64),
            split="train",
            num_classes=2,
        )
        with pytest.raises(AttackError):
            train_transfer_patch(channel_zero_net(), empty, 1, NoiseDomain.NETWORK)

    def test_sidecar_records_run(self, flat_train_set):
        cfg = TransferConfig(step_size=0.0, max_total_iterations=3, seed=5)
        sidecar = train_transfer_patch(channel_zero_net(), flat_train_set, 1, NoiseDomain.NETWORK, cfg).sidecar()
        assert sidecar.target == 1
        assert sidecar.seed == 5
        assert sidecar.size == 5
        assert sidecar.training_images == 4
        assert sidecar.filtered_images == 0
