import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from animlab.diffusion import AnimationModel, randn, sample_segment, stage1_loss, stage2_loss
from animlab.schedule import (
    forward_noise,
    make_noise_schedule,
    predict_x0,
    reverse_step,
    sampling_timesteps,
)
from animlab.synthdata import generate_clip

T2 = make_noise_schedule(2, 0.1, 0.2)


# -- schedule ------------------------------------------------------------------------------


def test_single_step_schedule():
    s = make_noise_schedule(1, 0.5, 0.5)
    assert s.alphas.tolist() == [0.5]
    assert s.alpha_bars.tolist() == [0.5]


def test_two_step_schedule():
    assert T2.alpha_bars.tolist() == pytest.approx([0.9, 0.72], abs=1e-15)


def test_alpha_bars_strictly_decrease():
    ab = make_noise_schedule(100, 1e-4, 0.02).alpha_bars
    assert torch.all(ab[1:] < ab[:-1])


@pytest.mark.parametrize("args", [(0, 0.1, 0.2), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
def test_schedule_rejects_bad_ranges(args):
    with pytest.raises(ValueError):
        make_noise_schedule(*args)


def test_forward_noise_examples():
    x0 = torch.ones(2, 3, dtype=torch.float64)
    eps = torch.ones(2, 3, dtype=torch.float64)
    out = forward_noise(T2, x0, 1, eps)
    assert torch.allclose(out, torch.full((2, 3), math.sqrt(0.72) + math.sqrt(0.28), dtype=torch.float64))
    # the exact value is 1.377678...; the rounded literal is only good to ~1e-5
    assert out[0, 0].item() == pytest.approx(1.37769, abs=2e-5)
    assert torch.equal(forward_noise(T2, x0, -1, eps * 7), x0)
    zero = forward_noise(T2, torch.zeros_like(x0), 0, eps)
    assert torch.allclose(zero, torch.full_like(x0, math.sqrt(0.1)))


def test_forward_noise_shape_mismatch():
    with pytest.raises(ValueError):
        forward_noise(T2, torch.zeros(2), 0, torch.zeros(3))


@settings(max_examples=30, deadline=None)
@given(t=st.integers(0, 99), seed=st.integers(0, 2**16))
def test_forward_noise_round_trip(t, seed):
    s = make_noise_schedule(100, 1e-3, 0.2)
    g = torch.Generator().manual_seed(seed)
    x0 = torch.rand(3, 4, 4, generator=g, dtype=torch.float64) * 2 - 1
    eps = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
    z = forward_noise(s, x0, t, eps)
    assert torch.allclose(predict_x0(s, z, eps, t), x0, atol=1e-9)


# -- reverse step --------------------------------------------------------------------------


def test_ddim_step_by_hand():
    z, e = torch.tensor([0.8], dtype=torch.float64), torch.tensor([0.3], dtype=torch.float64)
    x0 = (0.8 - math.sqrt(0.28) * 0.3) / math.sqrt(0.72)
    want = math.sqrt(0.9) * x0 + math.sqrt(0.1) * 0.3
    got = reverse_step(T2, z, e, 1, "ddim").item()
    assert abs(got - want) <= 1e-12


def test_ddpm_final_step_adds_no_noise():
    z, e = torch.tensor([0.8], dtype=torch.float64), torch.tensor([0.3], dtype=torch.float64)
    a = reverse_step(T2, z, e, 0, "ddpm", step_noise=torch.tensor([5.0], dtype=torch.float64))
    b = reverse_step(T2, z, e, 0, "ddpm")
    assert torch.equal(a, b)
    assert a.item() == pytest.approx((0.8 - math.sqrt(0.1) * 0.3) / math.sqrt(0.9), abs=1e-12)


def test_ddpm_needs_noise():
    with pytest.raises(ValueError, match="step_noise"):
        reverse_step(T2, torch.zeros(1), torch.zeros(1), 1, "ddpm")


def test_single_step_schedule_recovers_x0():
    s = make_noise_schedule(1, 0.5, 0.5)
    x0 = torch.tensor([0.3, -0.7], dtype=torch.float64)
    eps = torch.tensor([1.2, 0.1], dtype=torch.float64)
    z = forward_noise(s, x0, 0, eps)
    assert torch.allclose(reverse_step(s, z, eps, 0, "ddim"), x0, atol=1e-15)


def test_ddim_with_true_noise_follows_forward_process():
    s = make_noise_schedule(10, 0.05, 0.3)
    x0 = torch.tensor([0.5, -0.25], dtype=torch.float64)
    eps = torch.tensor([0.9, -1.1], dtype=torch.float64)
    z = forward_noise(s, x0, 9, eps)
    for t in range(9, 0, -1):
        z = reverse_step(s, z, eps, t, "ddim")
        assert torch.allclose(z, forward_noise(s, x0, t - 1, eps), atol=1e-12)


def test_reverse_step_validation():
    with pytest.raises(ValueError):
        reverse_step(T2, torch.zeros(1), torch.zeros(1), 2, "ddim")
    with pytest.raises(ValueError):
        reverse_step(T2, torch.zeros(1), torch.zeros(1), 1, "euler")


def test_sampling_timesteps():
    ts = sampling_timesteps(100, 25)
    assert ts[0] == 99 and ts[-1] == 3 and len(ts) == 25
    assert all(a - b == 4 for a, b in zip(ts, ts[1:]))
    assert sampling_timesteps(10, 10) == list(range(9, -1, -1))
    with pytest.raises(ValueError):
        sampling_timesteps(10, 11)


# -- composed model ------------------------------------------------------------------------


def test_predict_noise_shape_and_determinism():
    torch.manual_seed(0)
    from animlab.backbone import BackboneConfig

    model = AnimationModel(BackboneConfig(), make_noise_schedule(100, 1e-3, 0.2))
    clip = generate_clip(0, 0, 8)
    z = randn((1, 3, 8, 32, 32), 1)
    ref, poses = torch.from_numpy(clip.frames[0]), torch.from_numpy(clip.poses)
    with torch.no_grad():
        a = model.predict_noise(z, 40, ref, poses)
        b = model.predict_noise(z, 40, ref, poses)
    assert a.shape == (1, 3, 8, 32, 32)
    assert torch.equal(a, b)


def test_input_skip_is_the_identity_mixture(tiny_cfg, schedule):
    torch.manual_seed(0)
    model = AnimationModel(tiny_cfg, schedule)
    z = torch.randn(1, 3, 2, 16, 16)
    poses = torch.zeros(1, 2, 6, 16, 16)
    ref = torch.zeros(3, 16, 16)
    with torch.no_grad():
        raw = model.backbone(z, 30, model.encode_appearance(ref, 30).states, model.stack_pose_sequence(poses, z, 30))
        got = model.predict_noise(z, 30, ref, poses)
    ab = schedule.alpha_bars[30].float()
    assert torch.allclose(got, (1 - ab).sqrt() * z + ab.sqrt() * raw, atol=1e-6)


def test_stage1_loss_examples(tiny_model):
    g = torch.Generator().manual_seed(0)
    refs = torch.rand(1, 3, 16, 16, generator=g)
    targets = torch.rand(1, 3, 16, 16, generator=g)
    poses = torch.zeros(1, 6, 16, 16)
    eps = torch.randn(1, 3, 16, 16, generator=g)
    t = torch.tensor([10])
    for offset, want in ((0.0, 0.0), (0.5, 0.25)):
        tiny_model.predict_noise = lambda z, t, r, p, offset=offset, **kw: eps.unsqueeze(2) + offset
        assert stage1_loss(tiny_model, refs, targets, poses, t, eps).item() == pytest.approx(want, abs=1e-7)
    del tiny_model.predict_noise
    assert stage1_loss(tiny_model, refs, targets, poses, t, eps).item() >= 0


def test_stage2_loss_examples(tiny_model):
    clips = torch.rand(1, 3, 4, 16, 16)
    eps = torch.randn(1, 3, 4, 16, 16)
    for offset, want in ((0.0, 0.0), (1.0, 1.0)):
        tiny_model.predict_noise = lambda z, t, r, p, offset=offset, **kw: eps + offset
        got = stage2_loss(tiny_model, torch.zeros(1, 3, 16, 16), clips, torch.zeros(1, 4, 6, 16, 16),
                          torch.tensor([3]), eps, 4)
        assert got.item() == pytest.approx(want, abs=1e-7)


def test_loss_input_validation(tiny_model):
    with pytest.raises(ValueError, match="empty"):
        stage1_loss(tiny_model, torch.zeros(0, 3, 16, 16), torch.zeros(0, 3, 16, 16), torch.zeros(0, 6, 16, 16),
                    torch.zeros(0, dtype=torch.long), torch.zeros(0, 3, 16, 16))
    with pytest.raises(ValueError, match="frames"):
        stage2_loss(tiny_model, torch.zeros(1, 3, 16, 16), torch.zeros(1, 3, 3, 16, 16),
                    torch.zeros(1, 3, 6, 16, 16), torch.tensor([1]), torch.zeros(1, 3, 3, 16, 16), 4)


def test_stage1_loss_descends_on_fixed_batch(tiny_cfg, schedule):
    torch.manual_seed(0)
    model = AnimationModel(tiny_cfg, schedule)
    clip = generate_clip(5, 6, 4, 16, 16)
    refs = torch.from_numpy(clip.frames[[0, 0, 0, 0]])
    targets = torch.from_numpy(clip.frames)
    poses = torch.from_numpy(clip.poses)
    g = torch.Generator().manual_seed(1)
    t = torch.randint(0, 100, (4,), generator=g)
    eps = torch.randn(4, 3, 16, 16, generator=g)
    opt = torch.optim.Adam(model.parameters(), lr=2e-3)
    losses = []
    for _ in range(200):
        loss = stage1_loss(model, refs, targets, poses, t, eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert losses[-1] < 0.5 * losses[0]


def test_stage2_step_leaves_non_temporal_parameters_untouched(tiny_model):
    from animlab.training import JointTrainingConfig, trainable_names

    names = trainable_names(tiny_model, 2, JointTrainingConfig())
    before = {n: p.detach().clone() for n, p in tiny_model.named_parameters()}
    for n, p in tiny_model.named_parameters():
        p.requires_grad_(n in names)
    opt = torch.optim.Adam([p for n, p in tiny_model.named_parameters() if n in names], lr=1e-2)
    clips = torch.rand(1, 3, 4, 16, 16) * 2 - 1
    poses = torch.from_numpy(generate_clip(0, 0, 4, 16, 16).poses).unsqueeze(0)
    loss = stage2_loss(tiny_model, clips[:, :, 0], clips, poses, torch.tensor([50]), torch.randn_like(clips), 4)
    opt.zero_grad()
    loss.backward()
    opt.step()
    changed = {n for n, p in tiny_model.named_parameters() if not torch.equal(p, before[n])}
    assert changed and changed <= names
    assert all(torch.equal(p, before[n]) for n, p in tiny_model.named_parameters() if n not in names)


# -- sampler -------------------------------------------------------------------------------


def test_sampler_is_deterministic(tiny_model):
    clip = generate_clip(0, 0, 3, 16, 16)
    ref, poses = torch.from_numpy(clip.frames[0]), torch.from_numpy(clip.poses)
    noise = randn((1, 3, 3, 16, 16), 4)
    a = sample_segment(tiny_model, ref, poses, noise, steps=5, seed=4)
    b = sample_segment(tiny_model, ref, poses, noise, steps=5, seed=4)
    assert torch.equal(a, b)
    assert a.abs().max() <= 1.0
    c = sample_segment(tiny_model, ref, poses, noise, steps=5, mode="ddpm", seed=4)
    d = sample_segment(tiny_model, ref, poses, noise, steps=5, mode="ddpm", seed=4)
    assert torch.equal(c, d)


def test_sampler_with_oracle_noise_recovers_target():
    """With a prediction that knows x0, DDIM lands on x0 from any start."""
    s = make_noise_schedule(100, 1e-3, 0.2)
    x0 = torch.rand(1, 3, 2, 8, 8, dtype=torch.float64) * 1.6 - 0.8

    class Stub:
        schedule = s
        dtype = torch.float64

    def oracle(z, t):
        ab = s.alpha_bars[t]
        return (z - ab.sqrt() * x0) / (1 - ab).sqrt()

    out = sample_segment(Stub(), torch.zeros(3, 8, 8), None, randn(x0.shape, 0, dtype=torch.float64),
                         steps=25, predict=oracle)
    assert torch.allclose(out, x0, atol=1e-9)
