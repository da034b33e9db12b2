"""Frozen, seed-fixed stand-ins for the pretrained backbones.

The stimulus embedder is a fixed random token-mixing network over image
patches: it defines the low-layer and final-layer stimulus embeddings and
the pooled per-frame vectors used by the metrics. The VAE stub is a fixed
linear encode/decode pair in logit space with a documented round-trip
error on smooth inputs. The classifiers are fixed linear readouts over the
embedder's pooled space. None of these have trainable state.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeMismatch


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def gaussian_blur(frames: np.ndarray, sigma: float = 2.0) -> np.ndarray:
    """Separable Gaussian blur over the trailing two axes, reflect padding."""
    radius = max(1, int(math.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()

    def conv_last(a: np.ndarray) -> np.ndarray:
        padded = np.concatenate(
            [a[..., radius:0:-1], a, a[..., -2:-radius - 2:-1]], axis=-1
        )
        windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * radius + 1, axis=-1)
        return windows @ kernel

    blurred = conv_last(np.asarray(frames, dtype=np.float64))
    blurred = conv_last(np.swapaxes(blurred, -1, -2))
    return np.swapaxes(blurred, -1, -2)


class StimulusEmbedder:
    """Deterministic patch-token network: images -> (L, C) token embeddings.

    Layer l applies X <- X + tanh(M_l X W_l) * scale; the low-layer output
    keeps perceptual structure while deeper layers mix it nonlinearly.
    """

    def __init__(self, img_size: int, l_clip: int, c_clip: int,
                 n_layers: int = 8, low_layer: int = 2, seed: int = 0,
                 scale: float = 0.7):
        grid = round(math.isqrt(l_clip))
        if grid * grid != l_clip or img_size % grid != 0:
            raise ShapeMismatch(
                f"l_clip {l_clip} must be a square count dividing img_size {img_size}"
            )
        self.img_size = img_size
        self.l_clip = l_clip
        self.c_clip = c_clip
        self.n_layers = n_layers
        self.low_layer = low_layer
        self.scale = scale
        self._grid = grid
        self._patch = img_size // grid
        patch_dim = self._patch * self._patch
        rng = _rng(seed, 0)
        self.w_patch = rng.normal(0, 1 / math.sqrt(patch_dim), (patch_dim, c_clip))
        self.token_mix = rng.normal(0, 1 / math.sqrt(l_clip), (n_layers, l_clip, l_clip))
        self.channel_mix = rng.normal(0, 1 / math.sqrt(c_clip), (n_layers, c_clip, c_clip))
        self.pooled_center = np.zeros(c_clip)

    def _patches(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.shape[-2:] != (self.img_size, self.img_size):
            raise ShapeMismatch(
                f"expected {self.img_size}x{self.img_size} images, got {images.shape[-2:]}"
            )
        lead = images.shape[:-2]
        g, p = self._grid, self._patch
        x = images.reshape(*lead, g, p, g, p)
        x = np.moveaxis(x, -3, -2)  # (..., g, g, p, p)
        return x.reshape(*lead, self.l_clip, p * p)

    def layer_outputs(self, images: np.ndarray) -> list[np.ndarray]:
        """Token embeddings after each mixing layer, shallowest first."""
        x = self._patches(images) @ self.w_patch
        outputs = []
        for layer in range(self.n_layers):
            mixed = self.token_mix[layer] @ x @ self.channel_mix[layer]
            x = x + self.scale * np.tanh(mixed)
            outputs.append(x.copy())
        return outputs

    def embed(self, images: np.ndarray, layer: int | None = None) -> np.ndarray:
        layer = self.n_layers - 1 if layer is None else layer
        return self.layer_outputs(images)[layer]

    def embed_low(self, images: np.ndarray) -> np.ndarray:
        return self.embed(images, self.low_layer)

    def embed_high(self, images: np.ndarray) -> np.ndarray:
        return self.embed(images, self.n_layers - 1)

    def pooled(self, images: np.ndarray) -> np.ndarray:
        """Mean over tokens of the final layer: the per-frame vector."""
        return self.embed_high(images).mean(axis=-2)

    def pooled_centered(self, images: np.ndarray) -> np.ndarray:
        """Pooled vectors minus the calibration mean.

        Centering removes the common component shared by all frames so
        cosine similarities respond to content, not to the patch baseline.
        Uncalibrated embedders have a zero center.
        """
        return self.pooled(images) - self.pooled_center


class VaeStub:
    """Fixed linear encode/decode pair standing in for a pretrained VAE.

    encode: clip to (delta, 1-delta), map to logits, average-pool to the
    latent grid, lift each cell onto a fixed unit channel vector.
    decode: project channels back, nearest-upsample, sigmoid. Zero latents
    decode to mid-gray. Round-trip RMSE on Gaussian-blurred (sigma >= 2)
    content stays under ROUND_TRIP_RMSE_BOUND.
    """

    ROUND_TRIP_RMSE_BOUND = 0.05

    def __init__(self, img_size: int, latent_channels: int, latent_size: int,
                 seed: int = 0, delta: float = 1e-3):
        if img_size % latent_size != 0:
            raise ShapeMismatch("latent_size must divide img_size")
        self.img_size = img_size
        self.latent_channels = latent_channels
        self.latent_size = latent_size
        self.factor = img_size // latent_size
        self.delta = delta
        w = _rng(seed, 1).normal(0, 1, latent_channels)
        self.channel_vec = w / np.linalg.norm(w)

    def encode(self, frames: np.ndarray) -> np.ndarray:
        """(..., H, W) images in [0,1] -> (..., C_lat, h, w) latents."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.shape[-2:] != (self.img_size, self.img_size):
            raise ShapeMismatch(f"expected {self.img_size}-pixel frames")
        x = np.clip(frames, self.delta, 1 - self.delta)
        logits = np.log(x / (1 - x))
        lead = frames.shape[:-2]
        h, f = self.latent_size, self.factor
        pooled = logits.reshape(*lead, h, f, h, f).mean(axis=(-3, -1))
        return pooled[..., None, :, :] * self.channel_vec[:, None, None]

    def decode(self, latents: np.ndarray) -> np.ndarray:
        """(..., C_lat, h, w) latents -> (..., H, W) images in (0,1)."""
        latents = np.asarray(latents, dtype=np.float64)
        expected = (self.latent_channels, self.latent_size, self.latent_size)
        if latents.shape[-3:] != expected:
            raise ShapeMismatch(f"expected latents shaped (..., {expected})")
        pooled = np.tensordot(latents, self.channel_vec, axes=([-3], [0]))
        up = np.repeat(np.repeat(pooled, self.factor, axis=-2), self.factor, axis=-1)
        return 1.0 / (1.0 + np.exp(-up))


def _whitener(samples: np.ndarray, shrinkage: float) -> tuple[np.ndarray, np.ndarray]:
    """Mean and shrunken inverse-sqrt covariance of a sample matrix."""
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / max(1, centered.shape[0] - 1)
    dim = cov.shape[0]
    cov = cov + shrinkage * (np.trace(cov) / dim) * np.eye(dim)
    vals, vecs = np.linalg.eigh(cov)
    return mean, vecs @ np.diag(1.0 / np.sqrt(vals)) @ vecs.T


class StubClassifier:
    """Fixed linear readout over whitened pooled stub embeddings.

    frame_probs scores one image; video_probs scores a clip through the
    mean of its per-frame pooled embeddings with a separate projection.
    Calibration (mean + shrinkage whitening over a probe set) keeps the
    score directions isotropic; without it a single high-variance
    embedding direction would dominate every prediction.
    """

    def __init__(self, embedder: StimulusEmbedder, k_cls: int, seed: int = 0,
                 input_blur_sigma: float = 2.0):
        self.embedder = embedder
        self.k_cls = k_cls
        self.input_blur_sigma = input_blur_sigma
        c = embedder.c_clip
        rng = _rng(seed, 2)
        self.w_frame = rng.normal(0, 1 / math.sqrt(c), (c, k_cls))
        self.w_video = rng.normal(0, 1 / math.sqrt(c), (c, k_cls))
        self.frame_mean = np.zeros(c)
        self.frame_whiten = np.eye(c)
        self.video_mean = np.zeros(c)
        self.video_whiten = np.eye(c)

    def _pooled(self, images: np.ndarray) -> np.ndarray:
        # pre-blur makes the readout insensitive to the sharp/blurry domain
        if self.input_blur_sigma > 0:
            images = gaussian_blur(images, self.input_blur_sigma)
        return self.embedder.pooled(images)

    def calibrate(self, frame_pooled: np.ndarray, video_pooled: np.ndarray,
                  shrinkage: float = 0.1) -> None:
        """Fit whitening statistics from probe embeddings, (M, C) each."""
        self.frame_mean, self.frame_whiten = _whitener(frame_pooled, shrinkage)
        self.video_mean, self.video_whiten = _whitener(video_pooled, shrinkage)

    @staticmethod
    def _softmax(logits: np.ndarray) -> np.ndarray:
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    def frame_probs(self, images: np.ndarray) -> np.ndarray:
        """(..., H, W) -> (..., K) class probabilities."""
        white = (self._pooled(images) - self.frame_mean) @ self.frame_whiten
        return self._softmax(white @ self.w_frame)

    def video_probs(self, clips: np.ndarray) -> np.ndarray:
        """(..., F, H, W) -> (..., K) class probabilities."""
        pooled = self._pooled(clips).mean(axis=-2)
        white = (pooled - self.video_mean) @ self.video_whiten
        return self._softmax(white @ self.w_video)
