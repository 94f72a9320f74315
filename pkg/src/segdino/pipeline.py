"""Glue between configs, weights and data: preprocessing, prediction, evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from segdino import checkpoint
from segdino import decoder as dec_mod
from segdino import encoder as enc_mod
from segdino import tensor as T
from segdino.config import RunConfig
from segdino.data import normalize
from segdino.decoder import DecoderParams, logits_to_mask, upsample_logits
from segdino.encoder import EncoderParams
from segdino.metrics import Mask, MetricReport, aggregate, evaluate


def preprocessor(cfg: RunConfig):
    mean, std = cfg.data.mean, cfg.data.std

    def prep(image: np.ndarray) -> np.ndarray:
        return normalize(np.asarray(image, dtype=np.float64), mean, std)

    return prep


@dataclass
class Model:
    encoder: EncoderParams
    decoder: DecoderParams
    cfg: RunConfig

    def predict(self, image: np.ndarray, preprocessed: bool = False):
        """``(logits, mask, foreground probability [H, W])`` for one image."""
        x = image if preprocessed else preprocessor(self.cfg)(image)
        enc, dcfg = self.cfg.encoder, self.cfg.decoder
        logits, mask = dec_mod.forward(x, self.encoder, self.decoder, enc, dcfg)
        grid = dcfg.grid_for(enc)
        pix = upsample_logits(logits, grid, (enc.image_h, enc.image_w))
        prob = T.softmax(pix.astype(np.float64))
        fg = prob[..., 1] if prob.shape[-1] == 2 else 1.0 - prob[..., 0]
        return logits, mask, np.clip(fg, 0.0, 1.0)

    def sections(self) -> dict[str, dict[str, np.ndarray]]:
        return {"encoder": dict(self.encoder.arrays), "decoder": dict(self.decoder.arrays)}

    def save(self, path) -> None:
        checkpoint.save(path, self.sections())


def load_model(path, cfg: RunConfig) -> Model:
    """Read a checkpoint and check it against the configured architecture."""
    sections = checkpoint.load(path)
    if "encoder" not in sections or "decoder" not in sections:
        raise checkpoint.CheckpointError(f"{path}: needs 'encoder' and 'decoder' sections, found {sorted(sections)}")
    checkpoint.check_shapes("encoder", sections["encoder"], enc_mod.param_shapes(cfg.encoder))
    checkpoint.check_shapes("decoder", sections["decoder"], dec_mod.param_shapes(cfg.decoder, cfg.encoder.embed_dim))
    dt = T.resolve_dtype(cfg.train.dtype)
    encoder = EncoderParams({k: v.astype(dt) for k, v in sections["encoder"].items()}, cfg.encoder.depth)
    decoder = DecoderParams({k: v.astype(dt) for k, v in sections["decoder"].items()})
    return Model(encoder, decoder, cfg)


def evaluate_samples(model: Model, samples: Sequence, gt_as_prediction: bool = False) -> tuple[list[MetricReport], MetricReport]:
    """Per-sample reports (in input order) and their aggregate."""
    m = model.cfg.metrics
    reports = []
    for s in samples:
        if gt_as_prediction:
            pred, prob = s.mask, s.mask.labels.astype(np.float64)
        else:
            _, pred, prob = model.predict(s.image)
        reports.append(evaluate(pred, s.mask, prob, m.beta_sq, m.threshold, sample_id=s.id))
    return reports, aggregate(reports)
