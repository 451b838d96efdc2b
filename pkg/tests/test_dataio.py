import numpy as np
import pytest

from rpcnet import containers
from rpcnet.dataio import (TrialRecord, export_trial_csv, import_trials, load_processed, load_trial,
                           register_importer, save_processed, save_trial)
from rpcnet.errors import ChannelCountError, ConfigError, CorruptContainerError, DurationMismatchError
from rpcnet.kinematics import forward_kinematics_array
from rpcnet.signals import ProcessedAngles, ProcessedEmg, RawEmgRecording


def make_trial(model, rng, seconds=2.0, channels=96, frames=None):
    n = int(seconds * 2048)
    frames = int(seconds * 100) if frames is None else frames
    emg = RawEmgRecording(rng.integers(-500, 500, (n, channels)).astype(np.int16))
    markers = forward_kinematics_array(model, np.tile(model.rest_angles, (frames, 1)))
    return TrialRecord("S0", "S0-T1", "train", emg, markers)


def test_round_trip(model, rng, tmp_path):
    t = make_trial(model, rng)
    t.markers[5, 3] = np.nan
    t.validity[5, 3] = False
    save_trial(tmp_path / "t.rpct", t)
    back = load_trial(tmp_path / "t.rpct")
    np.testing.assert_array_equal(back.emg.samples, t.emg.samples)
    np.testing.assert_array_equal(back.markers, t.markers)
    np.testing.assert_array_equal(back.validity, t.validity)
    assert (back.subject_id, back.trial_id, back.role) == ("S0", "S0-T1", "train")


def test_truncated_file(model, rng, tmp_path):
    p = tmp_path / "t.rpct"
    save_trial(p, make_trial(model, rng))
    p.write_bytes(p.read_bytes()[:-100])
    with pytest.raises(CorruptContainerError):
        load_trial(p)


def test_channel_count_error_names_expected(model, rng, tmp_path):
    t = make_trial(model, rng)
    p = tmp_path / "t.rpct"
    containers.write(p, "trial", {"subject_id": "S0", "trial_id": "x", "role": "train"},
                     {"emg": t.emg.samples[:, :95], "markers": t.markers, "validity": t.validity.astype("u1")})
    with pytest.raises(ChannelCountError, match="96"):
        load_trial(p)


def test_duration_mismatch(model, rng):
    with pytest.raises(DurationMismatchError):
        make_trial(model, rng, frames=190)
    make_trial(model, rng, frames=201)  # one sample of slack is fine


def test_role_checked(model, rng):
    t = make_trial(model, rng)
    with pytest.raises(ConfigError):
        TrialRecord("S0", "x", "validation", t.emg, t.markers)


def test_csv_export(model, rng, tmp_path):
    t = make_trial(model, rng, seconds=0.5)
    t.validity[0, 0] = False
    e, m = export_trial_csv(t, tmp_path)
    lines = e.read_text().splitlines()
    assert len(lines) == 1 + 1024
    assert lines[0].split(",")[:2] == ["time_s", "ch0"]
    first = m.read_text().splitlines()[1].split(",")
    assert first[1:4] == ["", "", ""]


def test_importer_registry(model, rng, tmp_path):
    save_trial(tmp_path / "a.rpct", make_trial(model, rng))
    assert len(import_trials(tmp_path, "native")) == 1

    @register_importer("fake")
    def _fake(path):
        return [make_trial(model, rng)]

    assert import_trials(tmp_path, "fake")[0].trial_id == "S0-T1"
    with pytest.raises(ConfigError):
        import_trials(tmp_path, "nope")


def test_processed_round_trip(rng, tmp_path):
    e = ProcessedEmg(rng.random((70, 96)), 81.92, 0)
    a = ProcessedAngles(rng.random((70, 24)), 81.92, 2, 0.5, rng.random((70, 23, 3)))
    save_processed(tmp_path / "p.rpcp", e, a, {"trial_id": "x"})
    e2, a2, meta = load_processed(tmp_path / "p.rpcp")
    np.testing.assert_array_equal(e2.envelope, e.envelope)
    np.testing.assert_array_equal(a2.trajectories, a.trajectories)
    np.testing.assert_array_equal(a2.markers, a.markers)
    assert meta["trial_id"] == "x" and a2.flagged_frames == 2
