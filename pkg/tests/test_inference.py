import numpy as np
import pytest
from scipy import signal

from oracles import butterworth_analog_gain
from rpcnet.errors import ContractError, InputTooShortError
from rpcnet.inference import REST_NORMALISED, butterworth_lowpass, infer_recursive, lowpass, smooth_and_project
from rpcnet.kinematics import TIP_MARKERS, forward_kinematics_array
from rpcnet.network import RpcNet, SubNetworkConfig
from rpcnet.signals import DEFAULT_LAYOUT, TrainingWindows

FS = 2048 / 25


def small_net(angle=True, seed=0, channels=4):
    cfg = SubNetworkConfig.from_inputs(16 * channels, 192 if angle else 0)
    return RpcNet(cfg, "full" if angle else "B", dtype=np.float64, seed=seed)


def test_butterworth_magnitude_against_analog():
    b, a = butterworth_lowpass(4, 1.0, FS)
    _, h = signal.freqz(b, a, worN=[0.0, 1.0, 10.0], fs=FS)
    assert abs(h[0]) == pytest.approx(1.0, abs=1e-12)
    assert abs(h[1]) == pytest.approx(1 / np.sqrt(2), rel=1e-3)
    assert abs(h[2]) == pytest.approx(butterworth_analog_gain(10.0, 1.0, 4), rel=0.10)


def test_lowpass_sinusoid_attenuation():
    t = np.arange(4000) / FS
    y = lowpass(np.sin(2 * np.pi * 10 * t), FS)
    amp = np.abs(y[2000:]).max()
    assert amp == pytest.approx(butterworth_analog_gain(10, 1, 4), rel=0.10)


def test_lowpass_constant_passes_unchanged():
    x = np.full((200, 24), 0.7)
    np.testing.assert_allclose(lowpass(x, FS), 0.7, rtol=1e-9)


def test_lowpass_is_causal(rng):
    x = rng.normal(size=300)
    y1 = lowpass(x, FS)
    x2 = x.copy()
    x2[200:] += 5
    np.testing.assert_array_equal(lowpass(x2, FS)[:200], y1[:200])


def test_output_length(rng):
    net = small_net(channels=96)
    out = infer_recursive(net, rng.random((150, 96)))
    assert out.shape == (150 - 64, 24)
    with pytest.raises(InputTooShortError):
        infer_recursive(net, rng.random((64, 96)))


def test_recursion_equals_teacher_forcing_on_own_outputs(rng):
    # feed the closed-loop outputs back as recorded history: every window must reproduce them
    net = small_net(seed=3)
    env = rng.random((300, 4))
    out = infer_recursive(net, env, chunk=50)
    history = np.vstack([np.full((64, 24), REST_NORMALISED), out])
    w = TrainingWindows(env, history, DEFAULT_LAYOUT)
    e, a, _ = w.batch(np.arange(len(w)))
    np.testing.assert_allclose(net.forward(e, a), out, atol=1e-12)


def test_identity_on_history_net_copies_seed(rng):
    # root output = most recent angle sample for each joint, EMG ignored
    net = small_net(seed=0)
    p = net.params
    for k in p:
        p[k][...] = 0
    K = 24
    for k in range(K):
        # angle.0 picks joint k of the newest sample (offset -8, slot 7)
        p["angle.0.W"][k, 7 * 24 + k, 0] = 1.0
        p["angle.1.W"][k, 0, 0] = 1.0
        p["root.0.W"][k, net.config.emg_hidden_width, 0] = 1.0
        p["root.1.W"][k, 0, 0] = 1.0
    seed = np.tile(np.linspace(0.2, 0.9, 24), (64, 1))
    out = infer_recursive(net, rng.random((200, 4)), seed_history=seed)
    np.testing.assert_allclose(out, np.broadcast_to(seed[0], out.shape))


def test_b_variant_ignores_seed_history(rng):
    net = small_net(angle=False)
    env = rng.random((120, 4))
    a = infer_recursive(net, env, seed_history=np.zeros((64, 24)))
    b = infer_recursive(net, env, seed_history=rng.random((64, 24)))
    np.testing.assert_array_equal(a, b)


def test_seed_history_shape_checked(rng):
    with pytest.raises(ContractError):
        infer_recursive(small_net(), rng.random((120, 4)), seed_history=np.zeros((10, 24)))


def test_chunking_does_not_change_results(rng):
    net = small_net(seed=1)
    env = rng.random((260, 4))
    np.testing.assert_allclose(infer_recursive(net, env, chunk=7), infer_recursive(net, env, chunk=1000), atol=1e-12)


def test_smooth_and_project_rest_pose(model):
    raw = np.full((100, 24), REST_NORMALISED)
    est = smooth_and_project(raw, model)
    rest = forward_kinematics_array(model, model.rest_angles)[0]
    np.testing.assert_allclose(est.angles_deg, np.broadcast_to(model.rest_angles, (100, 24)), atol=1e-9)
    for d, i in TIP_MARKERS.items():
        np.testing.assert_allclose(est.fingertips[d], np.broadcast_to(rest[i], (100, 3)), atol=1e-9)


def test_smooth_and_project_shape_check(model):
    with pytest.raises(ContractError):
        smooth_and_project(np.zeros((10, 23)), model)
