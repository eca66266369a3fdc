"""Tests for annotation parsing, synthetic scenes and scene queries."""

import numpy as np
import pytest

from conformal_cbf.dynamics import RobotState
from conformal_cbf.errors import ConfigError, ParseError
from conformal_cbf.scenario import (
    RobotTask,
    ScenarioFrameSet,
    load_annotations,
    load_scene_spec,
    reference_control,
    save_annotations,
    sensed_agents,
    synth_scene,
)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestLoadAnnotations:
    def test_single_row(self, tmp_path):
        p = write(tmp_path, "video.txt", '5 10 20 30 40 7 0 0 0 "Pedestrian"\n')
        scene = load_annotations(p)
        assert scene.scene_name == "video"
        assert set(scene.frames) == {7}
        assert np.array_equal(scene.frames[7][5], [20.0, 30.0])
        assert scene.labels[5] == "Pedestrian"

    def test_lost_rows_dropped(self, tmp_path):
        p = write(
            tmp_path,
            "a.txt",
            '1 0 0 2 2 0 0 0 0 "Pedestrian"\n'
            '1 0 0 2 2 1 1 0 0 "Pedestrian"\n'
            '1 0 0 2 2 2 0 0 0 "Pedestrian"\n',
        )
        scene = load_annotations(p)
        assert sorted(scene.frames) == [0, 2]

    def test_label_filter(self, tmp_path):
        p = write(
            tmp_path,
            "a.txt",
            '1 0 0 2 2 0 0 0 0 "Pedestrian"\n'
            '2 0 0 2 2 0 0 0 0 "Biker"\n'
            '3 0 0 2 2 0 0 0 0 "Cart"\n',
        )
        scene = load_annotations(p)
        assert set(scene.frames[0]) == {1}
        both = load_annotations(p, label_filter=("Pedestrian", "Biker"))
        assert set(both.frames[0]) == {1, 2}
        everything = load_annotations(p, label_filter=None)
        assert set(everything.frames[0]) == {1, 2, 3}

    def test_wrong_column_count(self, tmp_path):
        p = write(
            tmp_path,
            "a.txt",
            '1 0 0 2 2 0 0 0 0 "Pedestrian"\n1 0 0 2 2 0 0 0\n',
        )
        with pytest.raises(ParseError) as info:
            load_annotations(p)
        assert info.value.line == 2

    def test_non_numeric_field(self, tmp_path):
        p = write(tmp_path, "a.txt", '1 0 zero 2 2 0 0 0 0 "Pedestrian"\n')
        with pytest.raises(ParseError) as info:
            load_annotations(p)
        assert info.value.line == 1

    def test_duplicate_track_frame(self, tmp_path):
        p = write(
            tmp_path,
            "a.txt",
            '1 0 0 2 2 5 0 0 0 "Pedestrian"\n1 4 4 6 6 5 0 0 0 "Pedestrian"\n',
        )
        with pytest.raises(ParseError) as info:
            load_annotations(p)
        assert info.value.line == 2

    def test_empty_result_warns(self, tmp_path):
        p = write(tmp_path, "a.txt", '1 0 0 2 2 0 1 0 0 "Pedestrian"\n')
        with pytest.warns(UserWarning):
            load_annotations(p)

    def test_blank_lines_skipped(self, tmp_path):
        p = write(tmp_path, "a.txt", '\n1 0 0 2 2 0 0 0 0 "Pedestrian"\n\n')
        scene = load_annotations(p)
        assert set(scene.frames) == {0}

    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(17)
        frames = {}
        labels = {}
        for frame in range(5):
            row = {}
            for agent in range(1 + frame % 3):
                row[agent] = rng.uniform(-100, 1000, size=2)
                labels.setdefault(agent, "Pedestrian")
            frames[frame] = row
        scene = ScenarioFrameSet(
            scene_name="synthetic", fps=30.0, frames=frames, labels=labels
        )
        p = tmp_path / "out.txt"
        save_annotations(scene, p)
        back = load_annotations(p, scene_name="synthetic")
        assert set(back.frames) == set(scene.frames)
        for frame, row in scene.frames.items():
            assert set(back.frames[frame]) == set(row)
            for agent, pos in row.items():
                assert np.array_equal(back.frames[frame][agent], pos)


class TestFrameSetQueries:
    def scene(self):
        frames = {
            f: {1: np.array([float(f), 0.0]), 2: np.array([0.0, float(f)])}
            for f in range(10)
        }
        del frames[4][1]  # a gap in agent 1's track
        return ScenarioFrameSet(
            scene_name="q", fps=10.0, frames=frames, labels={1: "Pedestrian"}
        )

    def test_bounds_and_dt(self):
        s = self.scene()
        assert s.start_frame == 0
        assert s.end_frame == 10
        assert abs(s.dt - 0.1) <= 1e-15

    def test_history_respects_gap(self):
        s = self.scene()
        h = s.history_of(1, end_frame=8, max_frames=10)
        # contiguous run is frames 5, 6, 7 (frame 4 is missing)
        assert h.start_frame == 5
        assert h.n_samples == 3
        assert np.array_equal(h.positions[:, 0], [5.0, 6.0, 7.0])

    def test_history_cap(self):
        s = self.scene()
        h = s.history_of(2, end_frame=8, max_frames=3)
        assert h.start_frame == 5
        assert h.n_samples == 3

    def test_history_absent_agent(self):
        s = self.scene()
        assert s.history_of(99, end_frame=8, max_frames=4) is None
        assert s.history_of(1, end_frame=0, max_frames=4) is None

    def test_future_respects_gap(self):
        s = self.scene()
        f = s.future_of(1, start_frame=2, max_frames=10)
        assert f.start_frame == 2
        assert f.n_samples == 2  # frames 2, 3; frame 4 missing

    def test_future_cap_and_absent(self):
        s = self.scene()
        f = s.future_of(2, start_frame=0, max_frames=4)
        assert f.n_samples == 4
        assert s.future_of(1, start_frame=4, max_frames=2) is None

    def test_sensed_agents_strict_radius(self):
        frames = {
            0: {
                1: np.array([3.0, 0.0]),
                2: np.array([5.0, 0.0]),
                3: np.array([0.0, 4.999]),
            }
        }
        s = ScenarioFrameSet(scene_name="r", fps=30.0, frames=frames, labels={})
        got = sensed_agents(s, [0.0, 0.0], rho0=5.0, frame=0)
        assert [a for a, _ in got] == [1, 3]

    def test_sensed_agents_monotone_in_radius(self):
        rng = np.random.default_rng(3)
        frames = {0: {i: rng.uniform(-10, 10, size=2) for i in range(20)}}
        s = ScenarioFrameSet(scene_name="r", fps=30.0, frames=frames, labels={})
        previous = set()
        for rho0 in (2.0, 5.0, 9.0, 50.0):
            ids = {a for a, _ in sensed_agents(s, [0.0, 0.0], rho0, frame=0)}
            assert previous <= ids
            previous = ids


class TestRobotTask:
    def task(self):
        return RobotTask(
            start=RobotState(position=[0.0, 0.0], velocity=[0.0, 0.0]),
            goal=[10.0, 5.0],
            attract_gain=0.5,
            goal_radius=1.0,
        )

    def test_reference_control_points_at_goal(self):
        t = self.task()
        u = reference_control(t, RobotState(position=[4.0, 5.0], velocity=[0.0, 0.0]))
        assert np.allclose(u, [3.0, 0.0], atol=1e-15)

    def test_reference_control_vanishes_at_goal(self):
        t = self.task()
        u = reference_control(t, RobotState(position=[10.0, 5.0], velocity=[1.0, 0.0]))
        assert np.array_equal(u, [0.0, 0.0])

    def test_validation(self):
        with pytest.raises(Exception):
            RobotTask(
                start=RobotState(position=[0.0, 0.0], velocity=[0.0, 0.0]),
                goal=[10.0, 5.0],
                attract_gain=0.0,
                goal_radius=1.0,
            )


class TestSynthScene:
    def spec(self):
        return {
            "scene_name": "cross",
            "fps": 10.0,
            "duration": 3.0,
            "agents": [
                {
                    "id": 1,
                    "label": "Pedestrian",
                    "waypoints": [[0.0, [0.0, 0.0]], [3.0, [30.0, 0.0]]],
                },
                {
                    "id": 2,
                    "label": "Pedestrian",
                    "waypoints": [[1.0, [5.0, 5.0]], [2.0, [5.0, -5.0]]],
                },
            ],
        }

    def test_linear_interpolation(self):
        scene = synth_scene(self.spec())
        # agent 1 moves 10 px/s; frame 15 is t = 1.5
        assert np.allclose(scene.frames[15][1], [15.0, 0.0], atol=1e-12)

    def test_presence_window(self):
        scene = synth_scene(self.spec())
        assert 2 not in scene.frames[9]
        assert 2 in scene.frames[10]
        assert 2 in scene.frames[20]
        assert 2 not in scene.frames[21]

    def test_endpoint_values(self):
        scene = synth_scene(self.spec())
        assert np.allclose(scene.frames[0][1], [0.0, 0.0])
        assert np.allclose(scene.frames[30][1], [30.0, 0.0])

    def test_duplicate_id_rejected(self):
        spec = self.spec()
        spec["agents"].append(dict(spec["agents"][0]))
        with pytest.raises(ConfigError):
            synth_scene(spec)

    def test_non_monotone_schedule_rejected(self):
        spec = self.spec()
        spec["agents"][0]["waypoints"] = [[0.0, [0.0, 0.0]], [0.0, [1.0, 0.0]]]
        with pytest.raises(ConfigError):
            synth_scene(spec)

    def test_too_few_waypoints_rejected(self):
        spec = self.spec()
        spec["agents"][0]["waypoints"] = [[0.0, [0.0, 0.0]]]
        with pytest.raises(ConfigError):
            synth_scene(spec)

    def test_missing_keys_rejected(self):
        with pytest.raises(ConfigError):
            synth_scene({"scene_name": "x"})

    def test_yaml_spec_round_trip(self, tmp_path):
        import yaml

        p = tmp_path / "scene.yaml"
        p.write_text(yaml.safe_dump(self.spec()), encoding="utf-8")
        scene = synth_scene(load_scene_spec(p))
        assert scene.scene_name == "cross"
        assert np.allclose(scene.frames[15][1], [15.0, 0.0])

    def test_bad_yaml_rejected(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("scene_name: [unclosed", encoding="utf-8")
        with pytest.raises(ParseError):
            load_scene_spec(p)
        p2 = tmp_path / "list.yaml"
        p2.write_text("- 1\n- 2\n", encoding="utf-8")
        with pytest.raises(ParseError):
            load_scene_spec(p2)
