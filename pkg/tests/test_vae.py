"""Motion VAE: band-limited reconstruction and whitened latent geometry."""
import numpy as np
import pytest
import torch

from phasectl.errors import ModelNotReady, ShapeError
from phasectl.motion import kinematic_signal, part_signal_matrix
from phasectl.pipeline import corpus_for, holdout_for
from phasectl.spectral import oracle_frequency
from phasectl.vae import D_LATENT, N_TOKENS, MotionVAE, train_vae


@pytest.fixture(scope="module")
def vae(store) -> MotionVAE:
    return MotionVAE.load(store.vae())


@pytest.fixture(scope="module")
def corpus(run_config):
    return corpus_for(run_config)


def test_untrained_vae_refuses_to_run(corpus):
    fresh = MotionVAE(skeleton=corpus[0][0].skeleton)
    with pytest.raises(ModelNotReady):
        fresh.encode(corpus[0][0])


def test_encode_shape_and_window_check(vae, corpus):
    motion = corpus[0][0]
    z = vae.encode(motion)
    assert z.shape == (N_TOKENS, D_LATENT)
    short = motion.frames[:32]
    with pytest.raises(ShapeError):
        vae.encode(type(motion)(frames=short, fps=motion.fps,
                                skeleton=motion.skeleton))


def test_encode_batch_matches_single(vae, corpus):
    motions = [m for m, _ in corpus[:4]]
    zb = vae.encode_batch(motions)
    assert zb.shape == (4, N_TOKENS, D_LATENT)
    for i, m in enumerate(motions):
        assert torch.equal(zb[i], vae.encode(m))


def test_reconstruction_error_small(vae, corpus):
    """Round-trip MSE is a small fraction of the motion variance."""
    motions = [m for m, _ in corpus[:32]]
    z = vae.encode_batch(motions)
    x = torch.from_numpy(np.stack([m.frames for m in motions])).float()
    with torch.no_grad():
        recon = vae.decode_latent(z)
    mse = ((recon - x) ** 2).mean().item()
    var = x.var().item()
    assert mse <= 0.05 * var


def test_reconstruction_preserves_part_frequencies(vae, run_config):
    hits = total = 0
    for motion, truth in holdout_for(run_config)[:12]:
        rec = vae.decode(vae.encode(motion), label=motion.label)
        for part in ("left_up", "right_up", "left_low", "right_low", "trunk"):
            f_hat = oracle_frequency(kinematic_signal(rec, part).values)
            hits += abs(f_hat - truth.freq_true(part)) <= 0.5
            total += 1
    assert hits / total >= 0.9


def test_latent_whitening_statistics(vae, corpus):
    z = vae.encode_batch([m for m, _ in corpus]).reshape(len(corpus), -1)
    mu = z.mean(dim=0)
    assert mu.abs().max().item() < 0.15
    var = z.var(dim=0)
    # floored whitening: structured directions are ~1, sub-noise ones < 1
    assert var.max().item() < 1.5
    assert (var > 0.5).float().mean().item() > 0.3


def test_decode_latent_is_linear(vae):
    g = torch.Generator().manual_seed(0)
    a = torch.randn(1, N_TOKENS, D_LATENT, generator=g)
    b = torch.randn(1, N_TOKENS, D_LATENT, generator=g)
    with torch.no_grad():
        fa = vae.decode_latent(a)
        fb = vae.decode_latent(b)
        fab = vae.decode_latent(a + b)
        f0 = vae.decode_latent(torch.zeros_like(a))
    np.testing.assert_allclose((fab + f0).numpy(), (fa + fb).numpy(),
                               atol=1e-4)


def test_decode_is_band_limited(vae):
    g = torch.Generator().manual_seed(1)
    z = torch.randn(1, N_TOKENS, D_LATENT, generator=g)
    with torch.no_grad():
        frames = vae.decode_latent(z)[0].numpy()
    spec = np.fft.rfft(frames.reshape(vae.n_frames, -1), axis=0)
    assert np.abs(spec[vae.net.n_bins:]).max() < 1e-3


def test_save_load_roundtrip(vae, tmp_path, corpus):
    path = tmp_path / "vae.ckpt"
    vae.save(path)
    back = MotionVAE.load(path)
    assert back.fingerprint() == vae.fingerprint()
    m = corpus[0][0]
    assert torch.equal(back.encode(m), vae.encode(m))
    assert all(not p.requires_grad for p in back.net.parameters())


def test_training_is_deterministic(corpus):
    from phasectl.vae import VAEHyper
    small = [c for c in corpus[:16]]
    h = VAEHyper(epochs=3, seed=9)
    v1 = train_vae(small, h)
    v2 = train_vae(small, h)
    assert v1.fingerprint() == v2.fingerprint()


def test_amplitude_edit_maps_linearly_through_codec(vae, run_config):
    """Scaling one part's oscillation in frame space scales its decoded
    speed signal accordingly — the geometry the control stage leans on."""
    motion, _ = holdout_for(run_config)[1]
    z = vae.encode(motion)
    rec = vae.decode(z, label=motion.label)
    base = part_signal_matrix(rec)
    z2 = vae.encode(motion) * 1.0
    # double the deviation of the decoded motion around its own mean frame
    with torch.no_grad():
        frames = vae.decode_latent(z.unsqueeze(0))[0]
        mean_frame = frames.mean(dim=0, keepdim=True)
        doubled = mean_frame + 2.0 * (frames - mean_frame)
    m2 = type(motion)(frames=doubled.double().numpy(), fps=motion.fps,
                      skeleton=motion.skeleton, label=motion.label)
    scaled = part_signal_matrix(m2)
    centered_r = base - base.mean(axis=1, keepdims=True)
    centered_s = scaled - scaled.mean(axis=1, keepdims=True)
    np.testing.assert_allclose(centered_s, 2.0 * centered_r, atol=0.05)
    assert torch.equal(z2, z)
