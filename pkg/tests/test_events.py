import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evflight.events import (
    DEFAULT_GEOMETRY,
    Event,
    EventFormatError,
    MAX_EVENTS_PER_CORNER,
    CornerPatch,
    encode_input_spikes,
    encode_window,
    load_events,
    load_poses,
    local_to_sensor,
    preprocess,
    preprocess_arrays,
    window_and_route,
    write_event_file,
    write_pose_file,
)


class TestLoadEvents:
    def test_single_line(self, tmp_path):
        p = tmp_path / "ev.txt"
        p.write_text("1000 10 20 1\n")
        evs = list(load_events(p))
        assert evs == [Event(t=1000, x=10, y=20, polarity=1)]

    def test_empty_file(self, tmp_path):
        p = tmp_path / "ev.txt"
        p.write_text("")
        assert list(load_events(p)) == []

    def test_comments_and_blank_lines_skipped(self, tmp_path):
        p = tmp_path / "ev.txt"
        p.write_text("# header\n\n5 1 2 0\n")
        assert len(list(load_events(p))) == 1

    def test_non_monotonic_timestamp_reports_line(self, tmp_path):
        p = tmp_path / "ev.txt"
        p.write_text("5 1 1 0\n3 1 1 1\n")
        with pytest.raises(EventFormatError, match="non-monotonic timestamp at line 2"):
            list(load_events(p))

    def test_malformed_line_reports_line(self, tmp_path):
        p = tmp_path / "ev.txt"
        p.write_text("5 1 1 0\nnot an event\n")
        with pytest.raises(EventFormatError, match="line 2"):
            list(load_events(p))

    def test_out_of_bounds_pixel_rejected(self, tmp_path):
        p = tmp_path / "ev.txt"
        p.write_text("5 240 0 1\n")
        with pytest.raises(EventFormatError):
            list(load_events(p))

    def test_round_trip_write_read(self, tmp_path):
        p = tmp_path / "ev.txt"
        write_event_file(p, [10, 20], [30, 200], [0, 179], [1, 0])
        evs = list(load_events(p))
        assert [(e.t, e.x, e.y, e.polarity) for e in evs] == [(10, 30, 0, 1), (20, 200, 179, 0)]


class TestPreprocess:
    def test_top_left_anchor(self):
        hit = preprocess(Event(t=0, x=30, y=0, polarity=1))
        assert hit == ("TL", 0, 0)

    def test_bottom_right_anchor(self):
        hit = preprocess(Event(t=0, x=209, y=179, polarity=0))
        assert hit == ("BR", 15, 15)

    def test_center_discarded(self):
        assert preprocess(Event(t=0, x=120, y=90, polarity=1)) is None

    def test_outside_crop_discarded(self):
        assert preprocess(Event(t=0, x=10, y=50, polarity=1)) is None
        assert preprocess(Event(t=0, x=230, y=50, polarity=1)) is None

    def test_downsample_is_floor_division_everywhere(self):
        # exhaustive over the full 180x180 crop
        geom = DEFAULT_GEOMETRY
        offsets = geom.corner_offsets()
        for cy in range(180):
            for cx in range(180):
                ev = Event(t=0, x=cx + 30, y=cy, polarity=1)
                hit = preprocess(ev)
                dx, dy = cx // 2, cy // 2
                expected = None
                for corner, (x0, y0) in offsets.items():
                    if x0 <= dx < x0 + 16 and y0 <= dy < y0 + 16:
                        expected = (corner, dx - x0, dy - y0)
                assert hit == expected

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(0)
        n = 500
        t = np.sort(rng.integers(0, 10000, n))
        x = rng.integers(0, 240, n)
        y = rng.integers(0, 180, n)
        p = rng.integers(0, 2, n)
        routed = preprocess_arrays(t, x, y, p)
        counts = {c: 0 for c in routed}
        for i in range(n):
            hit = preprocess(Event(t=int(t[i]), x=int(x[i]), y=int(y[i]), polarity=int(p[i])))
            if hit:
                corner, lx, ly = hit
                row = routed[corner][counts[corner]]
                assert tuple(row) == (t[i], lx, ly, p[i])
                counts[corner] += 1
        assert sum(counts.values()) == sum(len(v) for v in routed.values())

    def test_local_to_sensor_inverse(self):
        for corner in ("TL", "TR", "BR", "BL"):
            for lx in (0, 7, 15):
                for ly in (0, 8, 15):
                    sx, sy = local_to_sensor(corner, lx, ly)
                    assert preprocess(Event(t=0, x=sx, y=sy, polarity=1)) == (corner, lx, ly)


def _tl_events(ts):
    return [Event(t=t, x=30, y=0, polarity=1) for t in ts]


class TestWindowing:
    def test_cap_keeps_first_ninety(self):
        evs = [Event(t=i, x=30 + 2 * (i % 16), y=0, polarity=1) for i in range(120)]
        windows = list(window_and_route(evs))
        assert len(windows) == 1
        patch = windows[0].patches["TL"]
        assert len(patch) == MAX_EVENTS_PER_CORNER
        assert patch.t.max() == 89  # first 90 in arrival order

    def test_half_open_window_boundaries(self):
        windows = list(window_and_route(_tl_events([4999, 5000])))
        assert len(windows) == 2
        assert windows[0].t_start == 0 and windows[0].t_end == 5000
        assert len(windows[0].patches["TL"]) == 1
        assert windows[1].t_start == 5000
        assert len(windows[1].patches["TL"]) == 1

    def test_empty_spans_still_tick(self):
        windows = list(window_and_route(_tl_events([100, 17000])))
        assert len(windows) == 4
        assert windows[1].count == 0 and windows[2].count == 0
        assert all(set(w.patches) == {"TL", "TR", "BR", "BL"} for w in windows)

    def test_stream_level_idempotence(self, tmp_path):
        rng = np.random.default_rng(42)
        n = 300
        t = np.sort(rng.integers(0, 50000, n))
        x = rng.integers(0, 240, n)
        y = rng.integers(0, 180, n)
        p = rng.integers(0, 2, n)
        path = tmp_path / "ev.txt"
        write_event_file(path, t, x, y, p)

        def run():
            out = []
            for w in window_and_route(load_events(path)):
                out.append((w.t_start, w.t_end, encode_window(w).tobytes()))
            return out

        assert run() == run()


class TestEncoding:
    def test_repeats_collapse(self):
        patch = CornerPatch(
            corner="TL",
            t=np.array([0, 1]),
            x=np.array([3, 3]),
            y=np.array([3, 3]),
            polarity=np.array([1, 1]),
        )
        enc = encode_input_spikes(patch)
        assert enc.sum() == 1.0
        assert enc[1, 3, 3] == 1.0

    def test_empty_patch_all_zero(self):
        assert encode_input_spikes(CornerPatch(corner="TL")).sum() == 0.0

    def test_polarity_planes_independent(self):
        patch = CornerPatch(
            corner="TL",
            t=np.array([0, 1]),
            x=np.array([5, 5]),
            y=np.array([7, 7]),
            polarity=np.array([1, 0]),
        )
        enc = encode_input_spikes(patch)
        assert enc[1, 7, 5] == 1.0 and enc[0, 7, 5] == 1.0
        assert enc.sum() == 2.0

    @given(
        st.lists(
            st.tuples(
                st.integers(0, 15), st.integers(0, 15), st.integers(0, 1)
            ),
            max_size=90,
        )
    )
    @settings(max_examples=50, deadline=None)
    def test_spike_count_bounds(self, pts):
        n = len(pts)
        patch = CornerPatch(
            corner="TL",
            t=np.arange(n),
            x=np.array([p[0] for p in pts], dtype=np.int64),
            y=np.array([p[1] for p in pts], dtype=np.int64),
            polarity=np.array([p[2] for p in pts], dtype=np.int64),
        )
        enc = encode_input_spikes(patch)
        distinct_pixels = len({(p[0], p[1]) for p in pts})
        assert enc.sum() <= 512
        assert enc.sum() <= 2 * distinct_pixels


class TestPoses:
    def test_round_trip(self, tmp_path):
        rows = np.array(
            [
                [0, 0.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0],
                [5555, 0.1, -0.2, 2.1, 1.0, 0.0, 0.0, 0.0],
            ]
        )
        p = tmp_path / "poses.txt"
        write_pose_file(p, rows)
        loaded = load_poses(p)
        assert np.allclose(loaded, rows)

    def test_bad_quaternion_rejected(self, tmp_path):
        p = tmp_path / "poses.txt"
        p.write_text("0 0 0 2 2.0 0 0 0\n")
        with pytest.raises(EventFormatError):
            load_poses(p)

    def test_non_monotonic_rejected(self, tmp_path):
        p = tmp_path / "poses.txt"
        p.write_text("10 0 0 2 1 0 0 0\n5 0 0 2 1 0 0 0\n")
        with pytest.raises(EventFormatError, match="line 2"):
            load_poses(p)
