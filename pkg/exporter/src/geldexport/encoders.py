"""Embedding encoders for the three modalities.

Model ids with the ``builtin/`` prefix are deterministic, dependency-light
featurizers that run anywhere (used for golden files and CI).  Ids with the
``hf/`` prefix load a pretrained model through `transformers` /
`sentence-transformers` in eval mode; those paths need the optional ``hf``
extra and downloaded weights.  Every encoder is inference-only: nothing here
ever fine-tunes or mutates a model.
"""

from __future__ import annotations

import hashlib
import wave
from pathlib import Path

import numpy as np


class EncoderError(Exception):
    pass


def _hash_index(token: str, dim: int, salt: str) -> tuple[int, float]:
    digest = hashlib.sha256((salt + token).encode("utf-8")).digest()
    idx = int.from_bytes(digest[:4], "little") % dim
    sign = 1.0 if digest[4] % 2 == 0 else -1.0
    return idx, sign


class BuiltinTextEncoder:
    """Character-trigram hashing into a fixed-width normalized vector."""

    def __init__(self, dim: int = 256):
        self.dim = dim

    def encode(self, text: str) -> np.ndarray:
        padded = f"  {text.lower()}  "
        out = np.zeros(self.dim, dtype=np.float64)
        for i in range(len(padded) - 2):
            idx, sign = _hash_index(padded[i : i + 3], self.dim, "tri:")
            out[idx] += sign
        norm = np.linalg.norm(out)
        return (out / norm if norm else out).astype(np.float32)


class BuiltinImageEncoder:
    """Tiny thumbnail features: 8x8 RGB means, normalized."""

    def __init__(self, side: int = 8):
        self.side = side
        self.dim = side * side * 3

    def encode(self, path) -> np.ndarray:
        from PIL import Image

        with Image.open(path) as img:
            small = img.convert("RGB").resize((self.side, self.side))
        arr = np.asarray(small, dtype=np.float64) / 255.0
        flat = arr.reshape(-1)
        return ((flat - flat.mean()) / (flat.std() + 1e-8)).astype(np.float32)


class BuiltinAudioEncoder:
    """Log-energy band features per frame; frames are mean-pooled.

    Audio longer than the window is chunked and chunk embeddings are
    averaged, so arbitrarily long PCM WAV files produce one vector.
    """

    def __init__(self, bands: int = 32, frame: int = 1024, window_s: float = 10.0):
        self.bands = bands
        self.frame = frame
        self.window_s = window_s
        self.dim = bands

    def _read_wav(self, path) -> tuple[np.ndarray, int]:
        with wave.open(str(path), "rb") as wav:
            rate = wav.getframerate()
            n = wav.getnframes()
            width = wav.getsampwidth()
            raw = wav.readframes(n)
        if width == 2:
            samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
        elif width == 1:
            samples = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128) / 128.0
        else:
            raise EncoderError(f"unsupported sample width {width} in {path}")
        channels = wave.open(str(path), "rb").getnchannels()
        if channels > 1:
            samples = samples.reshape(-1, channels).mean(axis=1)
        return samples, rate

    def _frame_features(self, chunk: np.ndarray) -> np.ndarray:
        n_frames = max(1, len(chunk) // self.frame)
        feats = np.zeros((n_frames, self.bands))
        for f in range(n_frames):
            seg = chunk[f * self.frame : (f + 1) * self.frame]
            spectrum = np.abs(np.fft.rfft(seg, n=self.frame)) ** 2
            edges = np.linspace(0, len(spectrum), self.bands + 1, dtype=int)
            for b in range(self.bands):
                lo, hi = edges[b], max(edges[b] + 1, edges[b + 1])
                feats[f, b] = np.log1p(spectrum[lo:hi].mean())
        return feats

    def encode(self, path) -> np.ndarray:
        samples, rate = self._read_wav(path)
        if len(samples) == 0:
            raise EncoderError(f"empty audio file {path}")
        window = max(self.frame, int(self.window_s * rate))
        chunks = [samples[i : i + window] for i in range(0, len(samples), window)]
        chunk_embs = [self._frame_features(c).mean(axis=0) for c in chunks if len(c)]
        return np.mean(chunk_embs, axis=0).astype(np.float32)


class HfTextEncoder:
    def __init__(self, model_id: str):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise EncoderError(
                "hf/ text models need the 'hf' extra (sentence-transformers)"
            ) from exc
        self.model = SentenceTransformer(model_id)
        self.model.eval()

    def encode(self, text: str) -> np.ndarray:
        return np.asarray(self.model.encode([text])[0], dtype=np.float32)


class HfImageEncoder:
    def __init__(self, model_id: str):
        try:
            import torch
            from transformers import AutoImageProcessor, AutoModel
        except ImportError as exc:
            raise EncoderError("hf/ image models need the 'hf' extra (transformers)") from exc
        self.torch = torch
        self.processor = AutoImageProcessor.from_pretrained(model_id)
        self.model = AutoModel.from_pretrained(model_id)
        self.model.eval()

    def encode(self, path) -> np.ndarray:
        from PIL import Image

        with Image.open(path) as img:
            inputs = self.processor(images=img.convert("RGB"), return_tensors="pt")
        with self.torch.no_grad():
            out = self.model(**inputs)
        if hasattr(out, "pooler_output") and out.pooler_output is not None:
            emb = out.pooler_output[0]
        else:  # class token
            emb = out.last_hidden_state[0, 0]
        return emb.numpy().astype(np.float32)


class HfAudioEncoder:
    """Frozen speech encoder; frame outputs are mean-pooled over time."""

    def __init__(self, model_id: str):
        try:
            import torch
            from transformers import AutoFeatureExtractor, AutoModel
        except ImportError as exc:
            raise EncoderError("hf/ audio models need the 'hf' extra (transformers)") from exc
        self.torch = torch
        self.extractor = AutoFeatureExtractor.from_pretrained(model_id)
        self.model = AutoModel.from_pretrained(model_id)
        self.model.eval()

    def encode(self, path) -> np.ndarray:
        samples, rate = BuiltinAudioEncoder()._read_wav(path)
        window = 30 * rate  # chunk long audio, mean-pool chunk embeddings
        chunk_embs = []
        for lo in range(0, len(samples), window):
            chunk = samples[lo : lo + window]
            inputs = self.extractor(chunk, sampling_rate=rate, return_tensors="pt")
            with self.torch.no_grad():
                out = self.model(**inputs)
            chunk_embs.append(out.last_hidden_state[0].mean(dim=0).numpy())
        return np.mean(chunk_embs, axis=0).astype(np.float32)


def make_encoder(modality: str, model_id: str):
    """Resolve a (modality, model id) pair to an encoder instance."""
    if model_id.startswith("builtin/"):
        name = model_id.split("/", 1)[1]
        if modality == "text_semantic":
            dim = int(name.rsplit("-", 1)[1]) if name.rsplit("-", 1)[-1].isdigit() else 256
            return BuiltinTextEncoder(dim)
        if modality == "image":
            return BuiltinImageEncoder()
        if modality == "audio":
            return BuiltinAudioEncoder()
        raise EncoderError(f"unknown modality {modality!r}")
    if model_id.startswith("hf/"):
        real_id = model_id.split("/", 1)[1]
        if modality == "text_semantic":
            return HfTextEncoder(real_id)
        if modality == "image":
            return HfImageEncoder(real_id)
        if modality == "audio":
            return HfAudioEncoder(real_id)
        raise EncoderError(f"no hf encoder wired for modality {modality!r}")
    raise EncoderError(
        f"model id {model_id!r} must start with 'builtin/' or 'hf/'"
    )
