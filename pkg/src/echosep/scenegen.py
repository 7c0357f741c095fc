"""Synthetic acoustic scenes for testing and benchmarking.

Narrowband mode draws per-bin multiplicative transfer functions and builds the
microphone mixture as an exact sum of component images (target source, echo,
interference, sensor noise), keeping the true mixing parameters for
diagnostics. Convolutive mode renders time-domain scenes from user-supplied
impulse-response WAV files. Component images are scaled to requested
source-to-echo, interference-to-echo and echo-to-noise power ratios measured
at the first microphone.
"""

import json
import numpy as np
from dataclasses import dataclass, asdict, field
from pathlib import Path
from scipy.signal import fftconvolve

from . import stft as _stft

__all__ = [
    "ScenarioRanges",
    "ScenarioConfig",
    "SceneTruth",
    "Scene",
    "sample_scenario",
    "synth_sources",
    "render_narrowband",
    "render_convolutive",
    "save_scene",
    "load_scene",
]

COMPONENTS = ("soi", "echo", "interference", "noise")


@dataclass
class ScenarioRanges:
    """Uniform sampling ranges for the acoustic-scene power ratios."""

    ser_db: tuple = (5.0, 10.0)
    ier_db: tuple = (0.0, 5.0)
    enr_db: tuple = (25.0, 35.0)
    mics: int = 4
    duration_s: float = 5.0
    mode: str = "narrowband"


@dataclass
class ScenarioConfig:
    """A concrete sampled scene: geometry-free power ratios plus bookkeeping."""

    mics: int = 4
    ser_db: float = 7.5
    ier_db: float = 2.5
    enr_db: float = 30.0
    seed: int = 0
    duration_s: float = 5.0
    mode: str = "narrowband"
    rir_paths: list = None

    def __post_init__(self):
        if self.mics < 2:
            raise ValueError("scenes need at least 2 microphones")
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")
        if self.mode not in ("narrowband", "convolutive"):
            raise ValueError(f"unknown scene mode {self.mode!r}")
        for name in ("ser_db", "ier_db"):
            v = getattr(self, name)
            if np.isnan(v) or v == np.inf:
                raise ValueError(f"{name} must be finite or -inf (component off)")
        if np.isnan(self.enr_db) or self.enr_db == -np.inf:
            raise ValueError("enr_db must be finite or +inf (noise off)")


@dataclass
class SceneTruth:
    """True narrowband mixing parameters (available in narrowband mode only)."""

    a_soi: np.ndarray    # (F, M) target steering vectors
    echo_atf: np.ndarray  # (F, M) loudspeaker-to-microphone transfer
    bg_mix: np.ndarray   # (F, M, M-1) interference mixing matrix


@dataclass
class Scene:
    """Mixture plus ground-truth component images in the STFT domain.

    mixture = sum of images (exact); frame_spec is None for scenes generated
    directly on an abstract frequency grid. time_signals holds time-domain
    renditions keyed like images plus "mixture"/"loudspeaker" when available.
    """

    mixture: np.ndarray      # (F, T, M)
    loudspeaker: np.ndarray  # (F, T)
    images: dict             # name -> (F, T, M)
    config: ScenarioConfig
    truth: SceneTruth = None
    frame_spec: object = None
    gains: dict = field(default_factory=dict)
    time_signals: dict = None

    @property
    def n_channels(self):
        return self.mixture.shape[2]


def sample_scenario(rng, ranges=None):
    """Draw a ScenarioConfig uniformly inside the given ranges."""
    ranges = ranges or ScenarioRanges()
    return ScenarioConfig(
        mics=ranges.mics,
        ser_db=float(rng.uniform(*ranges.ser_db)),
        ier_db=float(rng.uniform(*ranges.ier_db)),
        enr_db=float(rng.uniform(*ranges.enr_db)),
        seed=int(rng.integers(0, 2**31 - 1)),
        duration_s=ranges.duration_s,
        mode=ranges.mode,
    )


def _circular_gauss(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def synth_sources(rng, n_freqs, n_frames, n_bg=1):
    """Draw model-matched source spectra.

    The target source has joint broadband activity: each frame is an i.i.d.
    circular unit vector across frequency scaled by an exponential radial
    envelope, which makes the per-bin magnitudes strongly super-Gaussian.
    Background sources and the loudspeaker signal are independent; the
    background is stationary circular Gaussian, the loudspeaker reuses the
    non-Gaussian broadband construction.

    Returns (s, q, u): (F, T), (F, T, n_bg), (F, T).
    """
    s = _spherical_nongauss(rng, n_freqs, n_frames)
    q = _circular_gauss(rng, (n_freqs, n_frames, n_bg))
    u = _spherical_nongauss(rng, n_freqs, n_frames)
    return s, q, u


def _spherical_nongauss(rng, n_freqs, n_frames):
    g = _circular_gauss(rng, (n_freqs, n_frames))
    g /= np.linalg.norm(g, axis=0, keepdims=True)
    radius = rng.exponential(scale=1.0, size=n_frames)
    # normalize to unit average per-bin power
    radius *= np.sqrt(n_freqs / np.mean(radius**2))
    return g * radius[None, :]


def _power(x, channel=0):
    return float(np.mean(np.abs(x[..., channel]) ** 2))


def render_narrowband(cfg, frame_spec=None, n_freqs=None, n_frames=None, sources=None):
    """Build a narrowband scene with exact component images and known mixing.

    The grid is taken from frame_spec + cfg.duration_s when given, otherwise
    from explicit n_freqs/n_frames. Component gains are set so the power
    ratios measured at microphone 1 match cfg exactly.
    """
    if frame_spec is not None:
        n_samples = int(round(cfg.duration_s * frame_spec.sample_rate))
        n_freqs = frame_spec.n_freqs
        n_frames = frame_spec.n_frames(n_samples)
    if n_freqs is None or n_frames is None:
        raise ValueError("render_narrowband needs a frame_spec or explicit n_freqs/n_frames")
    rng = np.random.default_rng(cfg.seed)
    m = cfg.mics
    if sources is None:
        s, q, u = synth_sources(rng, n_freqs, n_frames, n_bg=m - 1)
    else:
        s, q, u = sources

    a_soi = _circular_gauss(rng, (n_freqs, m))
    echo_atf = _circular_gauss(rng, (n_freqs, m))
    bg_mix = _circular_gauss(rng, (n_freqs, m, m - 1))

    echo = echo_atf[:, None, :] * u[:, :, None]
    soi_raw = a_soi[:, None, :] * s[:, :, None]
    intf_raw = np.einsum("fmk,ftk->ftm", bg_mix, q)
    noise_raw = _circular_gauss(rng, (n_freqs, n_frames, m))

    p_echo = _power(echo)
    gain_soi = np.sqrt(p_echo * 10.0 ** (cfg.ser_db / 10.0) / _power(soi_raw))
    gain_intf = np.sqrt(p_echo * 10.0 ** (cfg.ier_db / 10.0) / _power(intf_raw))
    gain_noise = np.sqrt(p_echo * 10.0 ** (-cfg.enr_db / 10.0) / _power(noise_raw))

    # fold the source gains into the source signals so truth ATFs stay exact
    s = gain_soi * s
    q = gain_intf * q
    images = {
        "soi": gain_soi * soi_raw,
        "echo": echo,
        "interference": gain_intf * intf_raw,
        "noise": gain_noise * noise_raw,
    }
    mixture = images["soi"] + images["echo"] + images["interference"] + images["noise"]
    gains = {"soi": float(gain_soi), "interference": float(gain_intf),
             "noise": float(gain_noise), "echo": 1.0}
    return Scene(
        mixture=mixture,
        loudspeaker=u,
        images=images,
        config=cfg,
        truth=SceneTruth(a_soi=a_soi, echo_atf=echo_atf, bg_mix=bg_mix),
        frame_spec=frame_spec,
        gains=gains,
    )


def _load_rir(path, n_mics, sample_rate):
    rir, rate = _stft.read_wav(path)
    if rate != sample_rate:
        raise ValueError(f"RIR {path}: sample rate {rate} != {sample_rate}")
    if rir.shape[1] != n_mics:
        raise ValueError(f"RIR {path}: {rir.shape[1]} channels, expected {n_mics}")
    return rir


def render_convolutive(cfg, source_wavs, rir_wavs, frame_spec=None):
    """Render a time-domain scene from dry sources and impulse responses.

    source_wavs : paths of mono WAVs [target, loudspeaker, interferer]
    rir_wavs : paths of M-channel RIR WAVs in the same order, one channel
        per microphone, matching sample rates.

    Component images are the convolutions, scaled like the narrowband case;
    sensor noise is white Gaussian. True mixing parameters are not available
    in this mode.
    """
    frame_spec = frame_spec or _stft.FrameSpec.default()
    if len(source_wavs) != 3 or len(rir_wavs) != 3:
        raise ValueError("expected three sources and three RIRs: target, loudspeaker, interferer")
    for p in list(source_wavs) + list(rir_wavs):
        if not Path(p).exists():
            raise FileNotFoundError(f"missing input file: {p}")
    sr = frame_spec.sample_rate
    n_samples = int(round(cfg.duration_s * sr))
    m = cfg.mics
    dry = []
    for path in source_wavs:
        data, rate = _stft.read_wav(path)
        if rate != sr:
            raise ValueError(f"source {path}: sample rate {rate} != {sr}")
        mono = data[:, 0]
        if len(mono) < n_samples:
            reps = int(np.ceil(n_samples / len(mono)))
            mono = np.tile(mono, reps)
        dry.append(mono[:n_samples])
    rirs = [_load_rir(p, m, sr) for p in rir_wavs]

    def image_of(sig, rir):
        out = np.stack(
            [fftconvolve(sig, rir[:, ch])[:n_samples] for ch in range(m)], axis=1
        )
        return out

    soi_t = image_of(dry[0], rirs[0])
    echo_t = image_of(dry[1], rirs[1])
    intf_t = image_of(dry[2], rirs[2])
    rng = np.random.default_rng(cfg.seed)
    noise_t = rng.standard_normal((n_samples, m))

    p_echo = _power(echo_t)
    if p_echo <= 0:
        raise ValueError("echo image has zero power; check the loudspeaker source")
    gain_soi = np.sqrt(p_echo * 10.0 ** (cfg.ser_db / 10.0) / _power(soi_t))
    gain_intf = np.sqrt(p_echo * 10.0 ** (cfg.ier_db / 10.0) / _power(intf_t))
    gain_noise = np.sqrt(p_echo * 10.0 ** (-cfg.enr_db / 10.0) / _power(noise_t))
    time_signals = {
        "soi": gain_soi * soi_t,
        "echo": echo_t,
        "interference": gain_intf * intf_t,
        "noise": gain_noise * noise_t,
        "loudspeaker": dry[1][:, None],
    }
    time_signals["mixture"] = (
        time_signals["soi"] + time_signals["echo"]
        + time_signals["interference"] + time_signals["noise"]
    )
    images = {k: _stft.analyze(time_signals[k], frame_spec).data for k in COMPONENTS}
    return Scene(
        mixture=_stft.analyze(time_signals["mixture"], frame_spec).data,
        loudspeaker=_stft.analyze(time_signals["loudspeaker"], frame_spec).data[:, :, 0],
        images=images,
        config=cfg,
        truth=None,
        frame_spec=frame_spec,
        gains={"soi": float(gain_soi), "interference": float(gain_intf),
               "noise": float(gain_noise), "echo": 1.0},
        time_signals=time_signals,
    )


def scene_time_signals(scene):
    """Time-domain renditions of the mixture, loudspeaker and images.

    Uses stored signals when the scene was rendered in the time domain,
    otherwise synthesizes from the STFT tensors (requires a frame_spec).
    """
    if scene.time_signals is not None:
        return scene.time_signals
    if scene.frame_spec is None:
        raise ValueError("scene has no frame spec; cannot synthesize time signals")
    spec = scene.frame_spec
    out = {"mixture": _stft.synthesize(_stft.Spectrogram(scene.mixture, spec))}
    out["loudspeaker"] = _stft.synthesize(
        _stft.Spectrogram(scene.loudspeaker[:, :, None], spec)
    )
    for name, img in scene.images.items():
        out[name] = _stft.synthesize(_stft.Spectrogram(img, spec))
    return out


def save_scene(scene, out_dir):
    """Write a scene as a WAV set plus a JSON manifest; returns manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if scene.frame_spec is None:
        raise ValueError("cannot save a scene without a frame spec")
    sr = scene.frame_spec.sample_rate
    signals = scene_time_signals(scene)
    n_samples = int(round(scene.config.duration_s * sr))
    files = {}
    for name, sig in signals.items():
        fname = f"{name}.wav"
        _stft.write_wav(out / fname, sig[:n_samples], sr, dtype="float32")
        files[name] = fname
    manifest = {
        "schema": "echosep-scene-v1",
        "config": asdict(scene.config),
        "gains": scene.gains,
        "files": files,
        "sample_rate": sr,
        "frame": {"frame_len": scene.frame_spec.frame_len, "hop": scene.frame_spec.hop},
        "has_truth": scene.truth is not None,
    }
    if scene.truth is not None:
        np.savez(
            out / "truth.npz",
            a_soi=scene.truth.a_soi,
            echo_atf=scene.truth.echo_atf,
            bg_mix=scene.truth.bg_mix,
        )
        manifest["truth_file"] = "truth.npz"
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_scene(manifest_path):
    """Load a scene saved by save_scene, re-analyzing the WAVs to STFT."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema") != "echosep-scene-v1":
        raise ValueError(f"not a scene manifest: {manifest_path}")
    base = manifest_path.parent
    cfg = ScenarioConfig(**manifest["config"])
    sr = manifest["sample_rate"]
    spec = _stft.FrameSpec.default(
        manifest["frame"]["frame_len"], manifest["frame"]["hop"], sr
    )
    time_signals = {}
    for name, fname in manifest["files"].items():
        data, rate = _stft.read_wav(base / fname)
        if rate != sr:
            raise ValueError(f"{fname}: sample rate {rate} != manifest {sr}")
        time_signals[name] = data
    images = {k: _stft.analyze(time_signals[k], spec).data for k in COMPONENTS}
    truth = None
    if manifest.get("truth_file"):
        with np.load(base / manifest["truth_file"]) as npz:
            truth = SceneTruth(
                a_soi=npz["a_soi"], echo_atf=npz["echo_atf"], bg_mix=npz["bg_mix"]
            )
    return Scene(
        mixture=_stft.analyze(time_signals["mixture"], spec).data,
        loudspeaker=_stft.analyze(time_signals["loudspeaker"], spec).data[:, :, 0],
        images=images,
        config=cfg,
        truth=truth,
        frame_spec=spec,
        gains=manifest["gains"],
        time_signals=time_signals,
    )
