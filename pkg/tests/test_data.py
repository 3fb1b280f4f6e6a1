import math
import os

import numpy as np
import numpy.testing as npt
import pytest

from clipnet.data import (
    ClipDataset,
    Manifest,
    ManifestEntry,
    SynthConfig,
    class_weights,
    fseq_from_bytes,
    fseq_to_bytes,
    label_counts,
    preprocess_clip,
    read_fseq,
    spatial_resize_normalize,
    stratified_batches,
    synth_generate,
    temporal_downsample,
    uniform_batches,
    write_fseq,
)
from clipnet.errors import FormatError, ParameterError
from clipnet.rng import PURPOSE_SAMPLER, SeedStream
from clipnet.tensor import Tensor


class TestFseqFormat:
    def test_u8_round_trip_is_bitwise(self):
        clip = np.random.default_rng(0).integers(0, 256, size=(4, 3, 8, 8), dtype=np.uint8)
        out = fseq_from_bytes(fseq_to_bytes(clip))
        npt.assert_array_equal(out.data, clip)
        assert out.dtype == np.uint8

    def test_f32_round_trip_is_bitwise(self):
        clip = np.random.default_rng(1).normal(size=(2, 3, 4, 4)).astype(np.float32)
        out = fseq_from_bytes(fseq_to_bytes(clip))
        npt.assert_array_equal(out.data, clip)

    def test_file_round_trip(self, tmp_path):
        clip = np.random.default_rng(2).integers(0, 256, size=(3, 3, 5, 7), dtype=np.uint8)
        path = tmp_path / "clip.fseq"
        write_fseq(clip, path)
        npt.assert_array_equal(read_fseq(path).data, clip)

    def test_bad_magic_reports_offset(self):
        buf = bytearray(fseq_to_bytes(np.zeros((1, 1, 2, 2), dtype=np.uint8)))
        buf[:4] = b"JUNK"
        with pytest.raises(FormatError, match="byte 0"):
            fseq_from_bytes(bytes(buf))

    def test_unsupported_version_rejected(self):
        buf = bytearray(fseq_to_bytes(np.zeros((1, 1, 2, 2), dtype=np.uint8)))
        buf[4] = 9
        with pytest.raises(FormatError, match="version"):
            fseq_from_bytes(bytes(buf))

    def test_unknown_dtype_code_rejected(self):
        buf = bytearray(fseq_to_bytes(np.zeros((1, 1, 2, 2), dtype=np.uint8)))
        buf[12] = 250
        with pytest.raises(FormatError, match="dtype code"):
            fseq_from_bytes(bytes(buf))

    def test_truncated_payload_rejected(self):
        buf = fseq_to_bytes(np.zeros((1, 1, 2, 2), dtype=np.uint8))
        with pytest.raises(FormatError, match="payload"):
            fseq_from_bytes(buf[:-1])

    def test_trailing_bytes_rejected(self):
        buf = fseq_to_bytes(np.zeros((1, 1, 2, 2), dtype=np.uint8))
        with pytest.raises(FormatError, match="payload"):
            fseq_from_bytes(buf + b"\x00")

    def test_zero_extent_header_rejected(self):
        buf = bytearray(fseq_to_bytes(np.zeros((1, 1, 2, 2), dtype=np.uint8)))
        buf[5:7] = (0).to_bytes(2, "little")  # length field
        with pytest.raises(FormatError, match="extent"):
            fseq_from_bytes(bytes(buf))

    def test_non_4d_rejected(self):
        with pytest.raises(ParameterError):
            fseq_to_bytes(np.zeros((2, 2), dtype=np.uint8))


class TestManifest:
    def write_csv(self, tmp_path, text):
        path = tmp_path / "manifest.csv"
        path.write_text(text)
        return path

    def test_read_write_round_trip(self, tmp_path):
        entries = [
            ManifestEntry("a.fseq", 0, "train"),
            ManifestEntry("b.fseq", 3, "test"),
            ManifestEntry("c.fseq", 1, "validation"),
        ]
        path = tmp_path / "manifest.csv"
        Manifest(entries).write(path)
        again = Manifest.read(path)
        assert again.entries == entries
        assert again.base_dir == str(tmp_path)

    def test_header_is_required(self, tmp_path):
        path = self.write_csv(tmp_path, "file,class,part\na.fseq,0,train\n")
        with pytest.raises(FormatError, match="header"):
            Manifest.read(path)

    def test_non_integer_label_rejected(self, tmp_path):
        path = self.write_csv(tmp_path, "path,label,split\na.fseq,high,train\n")
        with pytest.raises(FormatError, match="line 2"):
            Manifest.read(path)

    def test_label_range_checked_when_given(self, tmp_path):
        path = self.write_csv(tmp_path, "path,label,split\na.fseq,7,train\n")
        with pytest.raises(FormatError, match="outside"):
            Manifest.read(path, num_classes=4)

    def test_field_count_checked(self, tmp_path):
        path = self.write_csv(tmp_path, "path,label,split\na.fseq,0\n")
        with pytest.raises(FormatError, match="fields"):
            Manifest.read(path)

    def test_duplicate_path_rejected(self):
        entries = [ManifestEntry("a.fseq", 0, "train")] * 2
        with pytest.raises(FormatError, match="duplicate"):
            Manifest(entries)

    def test_unknown_split_rejected(self):
        with pytest.raises(FormatError, match="split"):
            Manifest([ManifestEntry("a.fseq", 0, "holdout")])

    def test_split_selection_and_labels(self):
        m = Manifest(
            [
                ManifestEntry("a.fseq", 0, "train"),
                ManifestEntry("b.fseq", 2, "test"),
                ManifestEntry("c.fseq", 1, "train"),
            ]
        )
        assert [e.path for e in m.split("train")] == ["a.fseq", "c.fseq"]
        assert m.labels("train") == [0, 1]
        with pytest.raises(ParameterError):
            m.split("validation")

    def test_resolve_joins_relative_paths(self):
        m = Manifest([ManifestEntry("a.fseq", 0, "train")], base_dir="/data")
        assert m.resolve(m.entries[0]) == os.path.join("/data", "a.fseq")
        absolute = ManifestEntry("/elsewhere/b.fseq", 0, "train")
        assert Manifest([absolute]).resolve(absolute) == "/elsewhere/b.fseq"


class TestTemporalDownsample:
    def test_300_to_50_takes_every_sixth(self):
        frames = np.arange(300, dtype=np.float32).reshape(300, 1, 1, 1)
        out = temporal_downsample(frames, 50)
        # Stride floor(300/50) = 6: frames 0, 6, ..., 294.
        npt.assert_array_equal(out[:, 0, 0, 0], np.arange(50) * 6.0)

    def test_short_input_repeats_last_frame(self):
        frames = np.arange(3, dtype=np.float32).reshape(3, 1, 1, 1)
        out = temporal_downsample(frames, 5)
        npt.assert_array_equal(out[:, 0, 0, 0], [0.0, 1.0, 2.0, 2.0, 2.0])

    def test_exact_length_is_identity(self):
        frames = np.random.default_rng(0).normal(size=(7, 2, 3, 3))
        npt.assert_array_equal(temporal_downsample(frames, 7), frames)

    def test_non_divisible_length_floors_stride(self):
        # 7 frames to 3: stride floor(7/3) = 2, frames 0, 2, 4.
        frames = np.arange(7, dtype=np.float32).reshape(7, 1, 1, 1)
        out = temporal_downsample(frames, 3)
        npt.assert_array_equal(out[:, 0, 0, 0], [0.0, 2.0, 4.0])

    def test_tensor_in_tensor_out(self):
        frames = Tensor(np.zeros((4, 1, 2, 2), dtype=np.float32))
        assert isinstance(temporal_downsample(frames, 2), Tensor)

    def test_bad_target_rejected(self):
        with pytest.raises(ParameterError):
            temporal_downsample(np.zeros((4, 1, 2, 2)), 0)


class TestSpatialResize:
    def test_2x2_to_1x1_averages_all_pixels(self):
        # Half-pixel centers put the single output at the image center:
        # (1 + 2 + 3 + 4) / 4 = 2.5.
        img = np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32)
        out = spatial_resize_normalize(img, (1, 1), mean=0.0, std=1.0)
        npt.assert_allclose(out, [[[2.5]]], rtol=1e-6)

    def test_1x2_to_1x4_interpolation_values(self):
        # Manually calculated: sample centers land at source x of -0.25,
        # 0.25, 0.75, 1.25; with edge replication that blends [a, b] into
        # [a, 0.75a + 0.25b, 0.25a + 0.75b, b].
        img = np.array([[[0.0, 1.0]]], dtype=np.float32)
        out = spatial_resize_normalize(img, (1, 4), mean=0.0, std=1.0)
        npt.assert_allclose(out, [[[0.0, 0.25, 0.75, 1.0]]], rtol=1e-6)

    def test_u8_maps_to_unit_interval_then_normalizes(self):
        # (0/255 - 0.5)/0.5 = -1 and (255/255 - 0.5)/0.5 = +1.
        img = np.array([[[0, 255]]], dtype=np.uint8)
        out = spatial_resize_normalize(img, (1, 2), mean=0.5, std=0.5)
        npt.assert_allclose(out, [[[-1.0, 1.0]]], rtol=1e-6)

    def test_identity_resize_keeps_values(self):
        img = np.random.default_rng(3).integers(0, 256, size=(3, 5, 5), dtype=np.uint8)
        out = spatial_resize_normalize(img, (5, 5), mean=0.0, std=1.0)
        npt.assert_allclose(out, img.astype(np.float32) / 255.0, rtol=1e-6)

    def test_per_channel_mean_std(self):
        img = np.full((2, 1, 1), 0.5, dtype=np.float32)
        out = spatial_resize_normalize(img, (1, 1), mean=(0.5, 0.0), std=(1.0, 0.5))
        npt.assert_allclose(out[:, 0, 0], [0.0, 1.0], atol=1e-6)

    def test_non_positive_std_rejected(self):
        with pytest.raises(ParameterError):
            spatial_resize_normalize(np.zeros((1, 2, 2)), (2, 2), mean=0.0, std=0.0)

    def test_preprocess_clip_shape_and_dtype(self):
        raw = np.random.default_rng(4).integers(0, 256, size=(9, 3, 8, 8), dtype=np.uint8)
        out = preprocess_clip(raw, clip_len=4, frame_size=(6, 6))
        assert out.shape == (4, 3, 6, 6)
        assert out.dtype == np.float32
        assert float(out.data.min()) >= -1.0 and float(out.data.max()) <= 1.0


class TestClassWeights:
    def test_survey_scale_counts(self):
        # Manually calculated with w = N/(K*n): N = 6787, K = 4 gives
        # 6787/228, 6787/1424, 6787/13720, 6787/11776.
        w = class_weights([57, 356, 3430, 2944])
        npt.assert_allclose(w, [29.7675, 4.76615, 0.494679, 0.576342], rtol=1e-5)

    def test_desk_scale_counts(self):
        # N = 679: 679/24, 679/144, 679/1372, 679/1176.
        w = class_weights([6, 36, 343, 294])
        npt.assert_allclose(w, [28.2917, 4.71528, 0.494898, 0.577381], rtol=1e-5)

    def test_two_class_example(self):
        npt.assert_allclose(class_weights([1, 3]), [2.0, 2.0 / 3.0], rtol=1e-12)

    def test_balanced_counts_give_unit_weights(self):
        npt.assert_array_equal(class_weights([5, 5, 5]), [1.0, 1.0, 1.0])

    def test_count_weighted_mean_is_one(self):
        counts = [6, 36, 343, 294]
        w = class_weights(counts)
        npt.assert_allclose(np.dot(w, counts), sum(counts), rtol=1e-12)

    def test_zero_count_names_the_class(self):
        with pytest.raises(ParameterError, match="class 2"):
            class_weights([3, 4, 0, 5])

    def test_label_counts(self):
        assert label_counts([0, 1, 1, 3], 4) == [1, 2, 0, 1]
        with pytest.raises(ParameterError):
            label_counts([0, 4], 4)


class TestStratifiedBatches:
    def test_every_batch_covers_every_class(self):
        labels = [0] * 1 + [1] * 2 + [2] * 8 + [3] * 5
        batches = stratified_batches(labels, 4, SeedStream(0, PURPOSE_SAMPLER))
        assert len(batches) == 4
        for batch in batches:
            assert sorted({labels[i] for i in batch}) == [0, 1, 2, 3]

    def test_epoch_length_is_ceil_of_n_over_b(self):
        labels = [0] * 5 + [1] * 5
        batches = stratified_batches(labels, 4, SeedStream(1, PURPOSE_SAMPLER))
        assert len(batches) == math.ceil(10 / 4)
        assert all(len(b) == 4 for b in batches)

    def test_minority_items_repeat_within_epoch(self):
        # Round-robin over 2 classes with batch 4 draws class 0 twice per
        # batch; the single class-0 item must appear 2 * ceil(16/4) times.
        labels = [0] + [1] * 15
        batches = stratified_batches(labels, 4, SeedStream(2, PURPOSE_SAMPLER))
        flat = [i for b in batches for i in b]
        assert flat.count(0) == 8

    def test_batch_smaller_than_class_count_rejected(self):
        with pytest.raises(ParameterError, match="cover"):
            stratified_batches([0, 1, 2, 3], 3, SeedStream(3, PURPOSE_SAMPLER))

    def test_single_class_labels_allowed(self):
        # 3 batches of 2 make 6 draws from 5 items: the full permutation
        # plus one repeat from the reshuffled pool.
        batches = stratified_batches([0, 0, 0, 0, 0], 2, SeedStream(4, PURPOSE_SAMPLER))
        assert len(batches) == 3
        drawn = [i for b in batches for i in b]
        assert len(drawn) == 6
        assert set(drawn) == {0, 1, 2, 3, 4}

    def test_same_seed_reproduces_batches(self):
        labels = [0] * 3 + [1] * 9
        a = stratified_batches(labels, 4, SeedStream(5, PURPOSE_SAMPLER))
        b = stratified_batches(labels, 4, SeedStream(5, PURPOSE_SAMPLER))
        assert a == b

    def test_empty_labels_rejected(self):
        with pytest.raises(ParameterError):
            stratified_batches([], 2, SeedStream(6, PURPOSE_SAMPLER))


class TestUniformBatches:
    def test_partitions_all_indices(self):
        batches = uniform_batches(10, 4, SeedStream(0, PURPOSE_SAMPLER))
        assert [len(b) for b in batches] == [4, 4, 2]
        assert sorted(i for b in batches for i in b) == list(range(10))

    def test_same_seed_reproduces_order(self):
        a = uniform_batches(10, 3, SeedStream(1, PURPOSE_SAMPLER))
        b = uniform_batches(10, 3, SeedStream(1, PURPOSE_SAMPLER))
        assert a == b

    def test_empty_dataset_rejected(self):
        with pytest.raises(ParameterError):
            uniform_batches(0, 4, SeedStream(2, PURPOSE_SAMPLER))


class TestSynthConfig:
    def test_object_plus_travel_must_fit(self):
        # Max travel is 2 half-px * 15 steps // 2 = 15; 30 + 15 > 32.
        with pytest.raises(ParameterError, match="travel"):
            SynthConfig(counts=(5, 5, 5, 5), object_size=(10, 30))

    def test_oversized_object_rejected(self):
        with pytest.raises(ParameterError, match="too small"):
            SynthConfig(counts=(5, 5, 5, 5), object_size=(33, 40), speed=(1, 1), clip_len=2)

    def test_noise_range_checked(self):
        with pytest.raises(ParameterError, match="noise"):
            SynthConfig(counts=(5, 5, 5, 5), noise=0.5)

    def test_single_nonzero_class_rejected(self):
        with pytest.raises(ParameterError):
            SynthConfig(counts=(8, 0, 0, 0))

    def test_unknown_split_rejected(self):
        with pytest.raises(ParameterError, match="split"):
            SynthConfig(counts=(5, 5, 5, 5), split="holdout")

    def test_clip_len_minimum(self):
        with pytest.raises(ParameterError, match="clip_len"):
            SynthConfig(counts=(5, 5, 5, 5), clip_len=1)


class TestSynthGenerate:
    def test_bookkeeping_matches_counts(self, tmp_path):
        cfg = SynthConfig(counts=(3, 2, 0, 1), seed=11)
        manifest = synth_generate(cfg, tmp_path)
        assert len(manifest.entries) == 6
        assert label_counts(manifest.labels("train"), 4) == [3, 2, 0, 1]
        for e in manifest.entries:
            assert os.path.exists(manifest.resolve(e))

    def test_same_seed_regenerates_identical_files(self, tmp_path):
        cfg = SynthConfig(counts=(2, 2, 2, 2), seed=13)
        a = synth_generate(cfg, tmp_path / "a")
        b = synth_generate(cfg, tmp_path / "b")
        for ea, eb in zip(a.entries, b.entries):
            with open(a.resolve(ea), "rb") as fa, open(b.resolve(eb), "rb") as fb:
                assert fa.read() == fb.read()

    def test_different_seed_changes_files(self, tmp_path):
        a = synth_generate(SynthConfig(counts=(2, 2, 2, 2), seed=13), tmp_path / "a")
        b = synth_generate(SynthConfig(counts=(2, 2, 2, 2), seed=14), tmp_path / "b")
        same = 0
        for ea, eb in zip(a.entries, b.entries):
            with open(a.resolve(ea), "rb") as fa, open(b.resolve(eb), "rb") as fb:
                same += fa.read() == fb.read()
        assert same == 0

    def test_append_extends_manifest(self, tmp_path):
        synth_generate(SynthConfig(counts=(2, 2, 2, 2), seed=1, split="train"), tmp_path)
        manifest = synth_generate(
            SynthConfig(counts=(1, 1, 1, 1), seed=2, split="test"), tmp_path, append=True
        )
        assert len(manifest.split("train")) == 8
        assert len(manifest.split("test")) == 4

    def test_clips_have_configured_geometry(self, tmp_path):
        cfg = SynthConfig(counts=(2, 2, 2, 2), frame_size=(32, 32), clip_len=16, seed=3)
        manifest = synth_generate(cfg, tmp_path)
        clip = read_fseq(manifest.resolve(manifest.entries[0]))
        assert clip.shape == (16, 3, 32, 32)
        assert clip.dtype == np.uint8

    def test_vertical_classes_ramp_channel_zero(self, tmp_path):
        # The square's channel-0 value tracks its row, channel 1 its
        # column. Down clips must sweep channel 0 up in value with a fixed
        # channel 1; up clips the reverse; left/right swap the roles.
        cfg = SynthConfig(counts=(4, 4, 4, 4), noise=0.0, seed=17)
        manifest = synth_generate(cfg, tmp_path)
        for entry in manifest.entries:
            clip = read_fseq(manifest.resolve(entry)).data
            ch0 = np.array([f[0].max() for f in clip], dtype=np.int64)
            ch1 = np.array([f[1].max() for f in clip], dtype=np.int64)
            d0 = np.diff(ch0)
            d1 = np.diff(ch1)
            if entry.label == 0:    # up
                assert np.all(d0 <= 0) and ch0[0] > ch0[-1] and np.all(d1 == 0)
            elif entry.label == 1:  # down
                assert np.all(d0 >= 0) and ch0[0] < ch0[-1] and np.all(d1 == 0)
            elif entry.label == 2:  # left
                assert np.all(d1 <= 0) and ch1[0] > ch1[-1] and np.all(d0 == 0)
            else:                   # right
                assert np.all(d1 >= 0) and ch1[0] < ch1[-1] and np.all(d0 == 0)

    def test_square_stays_inside_the_frame(self, tmp_path):
        # No wraparound: in every frame the bright pixels form one solid
        # square fully inside the image.
        cfg = SynthConfig(counts=(3, 3, 3, 3), noise=0.0, seed=19)
        manifest = synth_generate(cfg, tmp_path)
        for entry in manifest.entries:
            clip = read_fseq(manifest.resolve(entry)).data
            for frame in clip:
                rows = np.flatnonzero(frame[2].max(axis=1))
                cols = np.flatnonzero(frame[2].max(axis=0))
                assert rows.size > 0 and cols.size > 0
                assert rows.size == rows[-1] - rows[0] + 1
                assert cols.size == cols[-1] - cols[0] + 1


def pooled_histogram(clip):
    """Order-free clip summary: one 256-bin histogram over all pixels."""
    return np.bincount(clip.reshape(-1), minlength=256) / clip.size


class TestFrameLevelAmbiguity:
    def test_pixel_histogram_classifier_scores_near_chance(self, tmp_path):
        # A nearest-centroid classifier on pooled pixel histograms of
        # frame-shuffled clips has no order information; on this task it
        # must land near the 25% chance rate.
        train = synth_generate(
            SynthConfig(counts=(25, 25, 25, 25), seed=31, split="train"), tmp_path
        )
        test = synth_generate(
            SynthConfig(counts=(10, 10, 10, 10), seed=32, split="test"), tmp_path, append=True
        )
        shuffle = np.random.default_rng(99)

        def histogram_of(entry):
            clip = read_fseq(test.resolve(entry)).data
            clip = clip[shuffle.permutation(clip.shape[0])]
            return pooled_histogram(clip)

        centroids = np.zeros((4, 256))
        for label in range(4):
            rows = [histogram_of(e) for e in train.split("train") if e.label == label]
            centroids[label] = np.mean(rows, axis=0)
        hits = 0
        total = 0
        for e in test.split("test"):
            h = histogram_of(e)
            pred = int(np.argmin(((centroids - h) ** 2).sum(axis=1)))
            hits += pred == e.label
            total += 1
        accuracy = hits / total
        assert 0.05 <= accuracy <= 0.45


class TestClipDataset:
    def make_dataset(self, tmp_path, cache=True):
        synth_generate(SynthConfig(counts=(2, 2, 2, 2), seed=5, split="train"), tmp_path)
        manifest = Manifest.read(tmp_path / "manifest.csv")
        return ClipDataset(manifest, "train", clip_len=16, frame_size=(32, 32), cache=cache)

    def test_records_are_preprocessed(self, tmp_path):
        ds = self.make_dataset(tmp_path)
        assert len(ds) == 8
        record = ds.load(0)
        assert record.tensor.shape == (16, 3, 32, 32)
        assert record.tensor.dtype == np.float32
        assert record.label == ds.labels[0]
        assert record.source_id.endswith(".fseq")

    def test_cache_reads_disk_once(self, tmp_path):
        ds = self.make_dataset(tmp_path, cache=True)
        ds.load(3)
        ds.load(3)
        assert len(ds.access_log) == 1

    def test_uncached_reads_disk_each_time(self, tmp_path):
        ds = self.make_dataset(tmp_path, cache=False)
        ds.load(3)
        ds.load(3)
        assert len(ds.access_log) == 2

    def test_batch_stacks_clips_and_labels(self, tmp_path):
        ds = self.make_dataset(tmp_path)
        clips, labels = ds.batch([0, 5, 2])
        assert isinstance(clips, Tensor)
        assert clips.shape == (3, 16, 3, 32, 32)
        assert labels.dtype == np.int64
        npt.assert_array_equal(labels, [ds.labels[0], ds.labels[5], ds.labels[2]])

    def test_missing_split_rejected(self, tmp_path):
        synth_generate(SynthConfig(counts=(2, 2, 2, 2), seed=5, split="train"), tmp_path)
        manifest = Manifest.read(tmp_path / "manifest.csv")
        with pytest.raises(ParameterError):
            ClipDataset(manifest, "test", clip_len=16, frame_size=(32, 32))
