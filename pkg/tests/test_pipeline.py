import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from privneg.errors import BadValue, StoreIoError, UnknownCaptureId, UnknownFilter
from privneg.group import CandidatePolicy
from privneg.pipeline import (
    FrameStore,
    Mode,
    PipelineConfig,
    SensorFrame,
    StageDelays,
    apply_filter,
    frame_from_bytes,
    frame_to_bytes,
    load_delays,
    run_pipeline,
    synthetic_frames,
    write_milestones,
)
from privneg.policy import FormFactorSet

from oracles import mean_fill

POLICY = CandidatePolicy((FormFactorSet("image"),), (True,))


def run(mode, n=1, seed=0, **kw):
    cfg = PipelineConfig(mode, **kw)
    return run_pipeline(cfg, synthetic_frames(n, seed), None if mode is Mode.NO_PRIVACY else POLICY)


class TestTotals:
    def test_no_privacy(self):
        (rec,) = run(Mode.NO_PRIVACY)
        assert rec.total_ms == 2300
        assert [ms.label for ms in rec.milestones] == ["captured", "published"]

    def test_privacy_no_update(self):
        (rec,) = run(Mode.PRIVACY_NO_UPDATE)
        assert rec.total_ms == 2545
        assert [ms.label for ms in rec.milestones] == ["captured", "stored", "filtered", "published"]

    def test_privacy_with_update(self):
        assert run(Mode.PRIVACY_WITH_UPDATE)[0].total_ms == 2640

    def test_totals_stable_across_frames(self):
        assert {r.total_ms for r in run(Mode.PRIVACY_WITH_UPDATE, n=6)} == {2640}

    def test_custom_delays(self, tmp_path):
        path = tmp_path / "d.xml"
        path.write_text('<delays capture="1000" queue-hop="10"/>')
        d = load_delays(path)
        assert (d.capture, d.queue_hop, d.filter_negotiate) == (1000, 10, 145)
        assert run(Mode.NO_PRIVACY, delays=d)[0].total_ms == 1010

    def test_bad_delays(self, tmp_path):
        path = tmp_path / "d.xml"
        path.write_text('<delays capture="-1"/>')
        with pytest.raises(BadValue):
            load_delays(path)

    def test_privacy_mode_needs_policy(self):
        with pytest.raises(BadValue):
            run_pipeline(PipelineConfig(Mode.PRIVACY_NO_UPDATE), synthetic_frames(1, 0))

    def test_mode_parse(self):
        assert Mode.parse("privacy-with-update") is Mode.PRIVACY_WITH_UPDATE
        with pytest.raises(BadValue):
            Mode.parse("paranoid")


class TestOrdering:
    @pytest.mark.parametrize("mode", list(Mode))
    def test_publish_in_capture_order(self, mode):
        records = run(mode, n=12, queue_capacity=1)
        assert [r.capture_id for r in records] == list(range(12))

    def test_persist_before_forward(self):
        events = []
        run_pipeline(PipelineConfig(Mode.PRIVACY_NO_UPDATE), synthetic_frames(5, 1), POLICY, events=events)
        for cid in range(5):
            assert events.index(("persisted", cid)) < events.index(("forwarded", cid))

    def test_outputs_on_disk(self, tmp_path):
        records = run_pipeline(PipelineConfig(Mode.PRIVACY_WITH_UPDATE), synthetic_frames(3, 2), POLICY,
                               store_dir=tmp_path / "store", out_dir=tmp_path / "out")
        assert FrameStore(tmp_path / "store").ids() == [0, 1, 2]
        for rec in records:
            assert FrameStore(tmp_path / "out").load(rec.capture_id).pixels == rec.payload

    def test_store_failure_surfaces(self, tmp_path):
        store = tmp_path / "store"
        FrameStore(store).persist(synthetic_frames(1, 0)[0])
        with pytest.raises(StoreIoError):
            run_pipeline(PipelineConfig(Mode.NO_PRIVACY), synthetic_frames(3, 0), store_dir=store)

    def test_wall_clock_mode(self):
        cfg = PipelineConfig(Mode.PRIVACY_NO_UPDATE, clock="wall", time_scale=0.001)
        records = run_pipeline(cfg, synthetic_frames(2, 0), POLICY)
        assert [r.total_ms for r in records] == [2545, 2545]


class TestFilters:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_blur_matches_oracle(self, seed):
        for frame in synthetic_frames(2, seed):
            out = apply_filter(frame, "region-blur")
            assert out.array().tobytes() == mean_fill(frame.array(), frame.regions).tobytes()

    def test_identity(self):
        frame = synthetic_frames(1, 3)[0]
        assert apply_filter(frame, "identity").pixels == frame.pixels

    def test_blur_leaves_outside_untouched(self):
        for frame in synthetic_frames(20, 5):
            out = apply_filter(frame, "region-blur").array()
            mask = np.ones_like(out, dtype=bool)
            for x, y, w, h in frame.regions:
                mask[y:y + h, x:x + w] = False
            assert np.array_equal(out[mask], frame.array()[mask])

    def test_regions_are_never_flat(self):
        for frame in synthetic_frames(200, 11):
            for x, y, w, h in frame.regions:
                block = frame.array()[y:y + h, x:x + w]
                assert block.min() != block.max()

    def test_published_regions_differ_from_original(self):
        frames = synthetic_frames(30, 8)
        records = run_pipeline(PipelineConfig(Mode.PRIVACY_WITH_UPDATE), frames, POLICY)
        for frame, rec in zip(frames, records):
            orig, pub = frame.array(), rec.frame.array()
            for x, y, w, h in frame.regions:
                assert not np.array_equal(orig[y:y + h, x:x + w], pub[y:y + h, x:x + w])
                assert len(np.unique(pub[y:y + h, x:x + w])) == 1

    def test_redact_metadata(self):
        frame = synthetic_frames(1, 4)[0]
        out = apply_filter(frame, "redact-metadata")
        assert out.regions == () and out.pixels == frame.pixels

    def test_unknown_filter(self):
        with pytest.raises(UnknownFilter):
            apply_filter(synthetic_frames(1, 0)[0], "sepia")
        with pytest.raises(UnknownFilter):
            PipelineConfig(Mode.PRIVACY_WITH_UPDATE, filter="sepia")

    def test_half_up_rounding(self):
        frame = SensorFrame(0, 2, 1, bytes([1, 2]), ((0, 0, 2, 1),))
        assert apply_filter(frame, "region-blur").pixels == bytes([2, 2])


class TestStore:
    def test_round_trip(self):
        for frame in synthetic_frames(10, 6):
            assert frame_from_bytes(frame_to_bytes(frame)) == frame

    def test_unknown_id(self, tmp_path):
        with pytest.raises(UnknownCaptureId):
            FrameStore(tmp_path).load(42)

    def test_truncated_record(self):
        with pytest.raises(StoreIoError):
            frame_from_bytes(frame_to_bytes(synthetic_frames(1, 0)[0])[:-1])

    def test_region_outside_frame(self):
        with pytest.raises(BadValue):
            SensorFrame(0, 2, 2, bytes(4), ((1, 1, 2, 2),))

    def test_deterministic_frames(self):
        assert synthetic_frames(5, 9) == synthetic_frames(5, 9)
        assert synthetic_frames(5, 9) != synthetic_frames(5, 10)

    def test_milestone_csv(self, tmp_path):
        path = tmp_path / "m.csv"
        write_milestones(path, run(Mode.NO_PRIVACY))
        assert path.read_bytes() == b"capture_id,label,elapsed_ms\n0,captured,2200.000\n0,published,2300.000\n"

    def test_delays_defaults(self):
        d = StageDelays()
        assert d.capture + d.queue_hop == 2300
