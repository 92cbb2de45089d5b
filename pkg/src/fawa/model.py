"""Micro CNN + LSTM + CTC recognizer.

Layout: invert the image so ink is 1 and zero padding reads as white, then
conv3x3(16) -> relu -> maxpool2 -> conv3x3(32) -> relu -> maxpool2; each
of the ``ceil(ceil(W/2)/2)`` remaining columns becomes one LSTM time step
(``32 * H/4`` features). One LSTM reads the columns left to right and a
second one right to left; a dense layer maps their concatenated hidden
states (2 x 64) to ``V + 1`` logits with the CTC blank last.

Batches of different widths are padded with white on the right and
masked so that padding never changes the logits of the real frames.
"""
from __future__ import annotations

import json
import logging
import os
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .ctc import ctc_loss_batch, greedy_decode, required_frames
from .textgen import ALPHABET, IMAGE_HEIGHT
from .validation import check_image

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PARAM_NAMES = ("conv1_k", "conv1_b", "conv2_k", "conv2_b", "lstm_wx", "lstm_wh", "lstm_b", "out_w", "out_b")
BACKWARD_NAMES = ("lstmr_wx", "lstmr_wh", "lstmr_b")


class TrainingDidNotConverge(RuntimeError):
    def __init__(self, accuracy: float, epochs: int):
        super().__init__(f"training did not converge: accuracy {accuracy:.4f} after {epochs} epochs")
        self.accuracy = accuracy
        self.epochs = epochs


def n_frames(width: int) -> int:
    return -(-(-(-width // 2)) // 2)


def pad_batch(images: Sequence[np.ndarray], width: int | None = None) -> np.ndarray:
    """Stack images right-padded with white to a common width."""
    width = width or max(im.shape[1] for im in images)
    out = np.ones((len(images), images[0].shape[0], width))
    for k, im in enumerate(images):
        out[k, :, : im.shape[1]] = im
    return out


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class CTCRecognizer(ClassifierMixin, BaseEstimator):
    """Line-image text recognizer trained with CTC.

    ``fit`` takes a list of ``(H, W)`` images in [0, 1] and their texts;
    ``predict`` returns greedy-decoded strings, so ``score`` is exact-match
    accuracy.
    """

    def __init__(
        self,
        alphabet: str = ALPHABET,
        height: int = IMAGE_HEIGHT,
        conv1_channels: int = 16,
        conv2_channels: int = 32,
        hidden: int = 64,
        bidirectional: bool = True,
        learning_rate: float = 1e-3,
        max_epochs: int = 300,
        batch_size: int = 16,
        clip_norm: float = 5.0,
        tone_jitter: float = 0.3,
        seed: int = 0,
        verbose: bool = False,
    ):
        self.alphabet = alphabet
        self.height = height
        self.conv1_channels = conv1_channels
        self.conv2_channels = conv2_channels
        self.hidden = hidden
        self.bidirectional = bidirectional
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.tone_jitter = tone_jitter
        self.seed = seed
        self.verbose = verbose

    # ------------------------------------------------------------------
    # parameters

    @property
    def n_classes(self) -> int:
        return len(self.alphabet) + 1

    @property
    def blank(self) -> int:
        return len(self.alphabet)

    def init_params(self, rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
        if self.height % 4:
            raise ValueError(f"height must be a multiple of 4, got {self.height}")
        rng = rng or np.random.default_rng(self.seed)
        c1, c2, hid = self.conv1_channels, self.conv2_channels, self.hidden
        feat = c2 * (self.height // 4)

        def he(shape, fan_in):
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

        def glorot(shape):
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            return rng.uniform(-lim, lim, size=shape)

        lstm_b = np.zeros(4 * hid)
        lstm_b[hid : 2 * hid] = 1.0
        dirs = 2 if self.bidirectional else 1
        params = {
            "conv1_k": he((3, 3, 1, c1), 9),
            "conv1_b": np.zeros(c1),
            "conv2_k": he((3, 3, c1, c2), 9 * c1),
            "conv2_b": np.zeros(c2),
            "lstm_wx": glorot((feat, 4 * hid)),
            "lstm_wh": glorot((hid, 4 * hid)),
            "lstm_b": lstm_b,
            "out_w": glorot((dirs * hid, self.n_classes)),
            "out_b": np.zeros(self.n_classes),
        }
        if self.bidirectional:
            params["lstmr_wx"] = glorot((feat, 4 * hid))
            params["lstmr_wh"] = glorot((hid, 4 * hid))
            params["lstmr_b"] = lstm_b.copy()
        return params

    def param_names(self) -> tuple[str, ...]:
        return PARAM_NAMES + (BACKWARD_NAMES if self.bidirectional else ())

    def set_weights(self, params: dict[str, np.ndarray]) -> "CTCRecognizer":
        """Install weights without training (e.g. zero or hand-set networks)."""
        ref = self.init_params(np.random.default_rng(0))
        for k in self.param_names():
            if np.shape(params[k]) != ref[k].shape:
                raise ValueError(f"parameter {k} has shape {np.shape(params[k])}, expected {ref[k].shape}")
        self.params_ = {k: np.array(params[k], dtype=np.float64) for k in self.param_names()}
        return self

    # ------------------------------------------------------------------
    # graph

    def _graph(
        self,
        images: np.ndarray,
        params: dict[str, T.Tensor],
        x: T.Tensor | None = None,
        widths: Sequence[int] | None = None,
    ):
        """Logits for a batch; ``widths`` marks the true width of padded items.

        Padding columns are zeroed after the inversion and after each conv
        layer, and the right-to-left LSTM starts at each item's last real
        frame, so every item gets exactly the logits of its unpadded image
        on its first ``n_frames(width)`` frames.
        """
        n, h, w = images.shape
        if h != self.height:
            raise ValueError(f"image height {h} does not match model height {self.height}")
        x = x if x is not None else T.Tensor(images)
        widths = [w] * n if widths is None else [int(v) for v in widths]
        padded = any(v != w for v in widths)

        def keep(a, cols):
            if not padded:
                return a
            valid = np.arange(a.shape[2])[None, :] < np.array(cols)[:, None]
            return T.mul(a, valid[:, None, :, None].astype(np.float64))

        half = [-(-v // 2) for v in widths]
        u = keep(T.reshape(1.0 - x, (n, h, w, 1)), widths)
        a = T.maxpool2(keep(T.relu(T.conv2d(u, params["conv1_k"], params["conv1_b"])), widths))
        a = T.maxpool2(keep(T.relu(T.conv2d(a, params["conv2_k"], params["conv2_b"])), half))
        _, h4, steps, c = a.shape
        seq = T.reshape(T.transpose(a, (0, 2, 1, 3)), (n, steps, h4 * c))
        hs = T.lstm_seq(seq, params["lstm_wx"], params["lstm_wh"], params["lstm_b"])
        if self.bidirectional:
            frames = [n_frames(v) for v in widths]
            back = T.lstm_seq(T.reverse_prefix(seq, frames), params["lstmr_wx"], params["lstmr_wh"], params["lstmr_b"])
            hs = T.concat([hs, T.reverse_prefix(back, frames)], axis=-1)
        return T.dense(hs, params["out_w"], params["out_b"])

    def _const_params(self) -> dict[str, T.Tensor]:
        check_is_fitted(self, "params_")
        return {k: T.Tensor(v) for k, v in self.params_.items()}

    def forward_batch(self, images: np.ndarray, widths: Sequence[int] | None = None) -> np.ndarray:
        """Logits ``(N, T, V + 1)`` for a stacked ``(N, H, W)`` batch.

        With ``widths``, frames past ``n_frames(widths[k])`` of item ``k``
        are padding and carry no meaning.
        """
        return self._graph(np.asarray(images, dtype=np.float64), self._const_params(), widths=widths).data

    def forward(self, image) -> np.ndarray:
        """Logits ``(T, V + 1)`` for one image."""
        image = check_image(image, height=self.height)
        return self.forward_batch(image[None])[0]

    def encode(self, text: str) -> list[int]:
        try:
            return [self.alphabet.index(ch) for ch in text]
        except ValueError:
            raise ValueError(f"text {text!r} has characters outside the alphabet") from None

    def decode_logits(self, logits: np.ndarray) -> str:
        return greedy_decode(logits, self.alphabet)

    def loss_and_input_grad(
        self, images: np.ndarray, targets: Sequence[Sequence[int]], widths: Sequence[int] | None = None
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-item CTC losses, d(loss)/d(image) and logits for a batch.

        Items do not interact: the summed loss separates over the batch.
        ``widths`` works as in :meth:`forward_batch`.
        """
        params = self._const_params()
        x = T.Tensor(np.asarray(images, dtype=np.float64), requires_grad=True)
        logits = self._graph(x.data, params, x, widths)
        frames = None if widths is None else [n_frames(v) for v in widths]
        loss, per_item = ctc_loss_batch(logits, targets, reduction="sum", lengths=frames)
        grads = T.backward(loss)
        return per_item, grads[x], logits.data

    # ------------------------------------------------------------------
    # estimator API

    def predict(self, X) -> list[str]:
        images = [check_image(im, height=self.height) for im in X]
        # group equal widths so no image is padded
        by_width: dict[int, list[int]] = {}
        for k, im in enumerate(images):
            by_width.setdefault(im.shape[1], []).append(k)
        result: dict[int, str] = {}
        for width, idx in sorted(by_width.items()):
            for start in range(0, len(idx), 64):
                chunk = idx[start : start + 64]
                logits = self.forward_batch(np.stack([images[k] for k in chunk]))
                for k, lg in zip(chunk, logits):
                    result[k] = self.decode_logits(lg)
        return [result[k] for k in range(len(images))]

    def score(self, X, y, sample_weight=None) -> float:
        """Exact-match accuracy of ``predict(X)`` against ``y``."""
        hits = np.array([p == t for p, t in zip(self.predict(X), y)], dtype=np.float64)
        if sample_weight is None:
            return float(hits.mean())
        return float(np.average(hits, weights=sample_weight))

    def transcribe(self, image) -> str:
        return self.decode_logits(self.forward(image))

    def _jitter(self, batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Random paper tone per sample: white becomes ``b``, ink stays black."""
        if self.tone_jitter <= 0:
            return batch
        b = 1.0 - self.tone_jitter * rng.random(len(batch))
        return b[:, None, None] * batch

    def fit(self, X, y) -> "CTCRecognizer":
        images = [check_image(im, height=self.height) for im in X]
        texts = list(y)
        if not images or len(images) != len(texts):
            raise ValueError("need a nonempty corpus with one text per image")
        labels = [self.encode(t) for t in texts]
        for im, lab, txt in zip(images, labels, texts):
            if required_frames(lab) > n_frames(im.shape[1]):
                raise ValueError(f"text {txt!r} does not fit in {n_frames(im.shape[1])} frames")

        # canonical order: training depends on the seed only, not on input order
        order = sorted(range(len(images)), key=lambda k: (texts[k], images[k].shape, images[k].tobytes()))
        images = [images[k] for k in order]
        texts = [texts[k] for k in order]
        labels = [labels[k] for k in order]

        rng = np.random.default_rng(self.seed)
        params = self.init_params(rng)
        opt = _Adam(params, self.learning_rate)
        self.params_ = params
        accuracy = 0.0
        epoch = 0
        for epoch in range(1, self.max_epochs + 1):
            perm = rng.permutation(len(images))
            total = 0.0
            for start in range(0, len(perm), self.batch_size):
                idx = perm[start : start + self.batch_size]
                batch = self._jitter(pad_batch([images[k] for k in idx]), rng)
                widths = [images[k].shape[1] for k in idx]
                tparams = {k: T.Tensor(v, requires_grad=True) for k, v in params.items()}
                logits = self._graph(batch, tparams, widths=widths)
                frames = [n_frames(v) for v in widths]
                loss, _ = ctc_loss_batch(logits, [labels[k] for k in idx], reduction="mean", lengths=frames)
                grads = T.backward(loss)
                gdict = {k: grads[t] for k, t in tparams.items()}
                norm = np.sqrt(sum(float((g * g).sum()) for g in gdict.values()))
                if norm > self.clip_norm:
                    gdict = {k: g * (self.clip_norm / norm) for k, g in gdict.items()}
                opt.step(params, gdict)
                total += loss.item() * len(idx)
            # full-corpus decoding is costly; skip it while the loss is clearly high
            if total / len(images) < 1.0 or epoch == self.max_epochs:
                accuracy = self.score(images, texts)
            if self.verbose:
                logger.info("epoch %d loss %.4f accuracy %.4f", epoch, total / len(images), accuracy)
            if accuracy == 1.0:
                break
        self.n_epochs_ = epoch
        self.train_accuracy_ = accuracy
        if accuracy < 1.0:
            raise TrainingDidNotConverge(accuracy, epoch)
        return self

    # ------------------------------------------------------------------
    # attack-facing helpers

    def input_saliency(self, image, target: str | Sequence[int]) -> np.ndarray:
        """Gradient of the CTC loss for ``target`` w.r.t. every pixel."""
        image = check_image(image, height=self.height)
        labels = self.encode(target) if isinstance(target, str) else list(target)
        _, grad, _ = self.loss_and_input_grad(image[None], [labels])
        return grad[0]

    def letter_logit(self, image, frame: int, letter: str) -> float:
        logits = self.forward(image)
        if not 0 <= frame < logits.shape[0]:
            raise IndexError(f"frame {frame} outside [0, {logits.shape[0]})")
        return float(logits[frame, self.alphabet.index(letter)])

    # ------------------------------------------------------------------
    # checkpoints

    def save(self, path) -> None:
        """Write an ``.npz`` checkpoint.

        Layout: one float64 array per parameter under its name, plus a
        ``__meta__`` entry holding a UTF-8 JSON document with the format
        version, hyperparameters and the shape of every array.
        """
        check_is_fitted(self, "params_")
        meta = {
            "format": "fawa-ocr-checkpoint",
            "version": CHECKPOINT_VERSION,
            "hyper": self.get_params(),
            "shapes": {k: list(v.shape) for k, v in self.params_.items()},
        }
        blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
        tmp = f"{os.fspath(path)}.tmp"
        with open(tmp, "wb") as fh:
            np.savez(fh, __meta__=blob, **self.params_)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "CTCRecognizer":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
            if meta.get("format") != "fawa-ocr-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')} v{meta.get('version')}")
            model = cls(**meta["hyper"])
            missing = [k for k in model.param_names() if k not in data.files]
            if missing:
                raise ValueError(f"{path}: checkpoint lacks arrays {missing}")
            params = {k: data[k].copy() for k in model.param_names()}
        for k, shape in meta["shapes"].items():
            if list(params[k].shape) != shape:
                raise ValueError(f"{path}: array {k} has shape {params[k].shape}, header says {shape}")
        model.params_ = params
        return model
