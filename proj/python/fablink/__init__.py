"""Python access to the fablink core: STEP features, telemetry, store and predictor."""

import json
import os

from . import _core
from ._core import (
    FablinkError,
    GeometryError,
    NoActiveModel,
    ProtocolError,
    StepError,
    StoreError,
)

__all__ = [
    "FablinkError",
    "GeometryError",
    "NoActiveModel",
    "ProtocolError",
    "StepError",
    "StoreError",
    "article_view",
    "extract_features",
    "generate_plate",
    "ingest_ndjson",
    "integrate_power",
    "nominal_outcome",
    "parse_step",
    "predict",
    "run_cli",
    "simulate_job",
    "train",
    "upload_variant",
]


def _text(step):
    # bytes, str or a path to a .step/.stp file
    if isinstance(step, bytes):
        return step.decode("latin-1")
    if isinstance(step, os.PathLike) or (isinstance(step, str) and not step.lstrip().startswith("ISO-10303-21")):
        with open(step, "rb") as f:
            return f.read().decode("latin-1")
    return step


def parse_step(step):
    return json.loads(_core.parse_step(_text(step)))


def extract_features(step):
    return json.loads(_core.extract_features(_text(step)))


def generate_plate(length, width, thickness, holes=()):
    """STEP text for a plate; holes are (cx, cy, diameter) tuples."""
    return _core.generate_plate(length, width, thickness, [tuple(h) for h in holes])


def nominal_outcome(features):
    return json.loads(_core.nominal_outcome(json.dumps(features)))


def simulate_job(article_id, features, t0_ms=0, noise=0.02, seed=0, machine_id="m1"):
    """NDJSON for one job on a fresh machine, hello line first."""
    return _core.simulate_job(article_id, json.dumps(features), t0_ms, noise, seed, machine_id)


def integrate_power(samples, t0_ms, t1_ms):
    return _core.integrate_power([(int(t), float(w)) for t, w in samples], t0_ms, t1_ms)


def upload_variant(data_dir, article_id, step, label="", create_article=True):
    return json.loads(_core.upload_variant(os.fspath(data_dir), article_id, _text(step), label, create_article))


def ingest_ndjson(data_dir, text):
    return json.loads(_core.ingest_ndjson(os.fspath(data_dir), text))


def article_view(data_dir, article_id):
    return json.loads(_core.article_view(os.fspath(data_dir), article_id))


def train(data_dir, epochs=500, seed=0):
    return json.loads(_core.train(os.fspath(data_dir), epochs, seed))


def predict(data_dir, step, co2_factor=None):
    return json.loads(_core.predict(os.fspath(data_dir), _text(step), co2_factor))


def run_cli(*args):
    """(exit_code, stdout, stderr) of the fablink command line."""
    return _core.run_cli([os.fspath(a) for a in args])
