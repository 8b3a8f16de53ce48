#!/usr/bin/env python3
"""
Model container: a directory holding ``model.ini`` plus binary matrices.

    model.ini          hyperparameters, modality names/kinds/dims, warnings
    code.lsem          C, d x N
    eigenvalues.lsem   retained eigenvalues, d x 1
    encoder_<i>.lsem   U_i, d x F_i
    mean_<i>.lsem      standardization statistics (only when enabled)
    scale_<i>.lsem
"""
import configparser
import logging
from pathlib import Path

from .base import new_config, read_ini, write_ini
from .exceptions import LseError, ValidationError
from .latent import Hyperparams, LseModel, Standardizer
from .matrices import read_matrix_values, save_matrix

logger = logging.getLogger('lse')

FORMAT_NAME = "lse-model"
FORMAT_VERSION = "1"
METADATA = "model.ini"


def save_model(model, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    config = new_config()
    config["model"] = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "lambda": repr(model.hyper.lam),
        "latent_dim": str(model.hyper.latent_dim),
        "standardize": str(model.hyper.standardize).lower(),
        "solver": model.hyper.solver,
        "train_instances": str(model.n_train),
    }
    save_matrix(model.code, path / "code.lsem")
    save_matrix(model.eigenvalues.reshape(-1, 1), path / "eigenvalues.lsem")
    for i, (name, kind, u) in enumerate(zip(model.modality_names, model.modality_kinds, model.encoders)):
        section = {"name": name, "kind": kind, "dim": str(u.shape[1]), "encoder": f"encoder_{i}.lsem"}
        save_matrix(u, path / f"encoder_{i}.lsem")
        standardizer = model.standardizers.get(name)
        if standardizer is not None:
            save_matrix(standardizer.mean.reshape(-1, 1), path / f"mean_{i}.lsem")
            save_matrix(standardizer.scale.reshape(-1, 1), path / f"scale_{i}.lsem")
            section["mean"] = f"mean_{i}.lsem"
            section["scale"] = f"scale_{i}.lsem"
        config[f"modality:{i}"] = section
    if model.warnings:
        config["warnings"] = {f"w{i}": w for i, w in enumerate(model.warnings)}
    write_ini(config, path / METADATA)
    logger.info(f"Saved model to {path}")


def load_model(path):
    path = Path(path)
    config = read_ini(path / METADATA)
    try:
        return _read_container(path, config)
    except LseError:
        raise
    except (KeyError, ValueError, configparser.Error) as e:
        raise ValidationError(f"{path}: incomplete or malformed model metadata: {e}", contract="model-format")


def _read_container(path, config):
    if config.get("model", "format", fallback=None) != FORMAT_NAME:
        raise ValidationError(f"{path} is not an LSE model container", contract="model-format")
    if config.get("model", "version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported model version {config.get('model', 'version')}", contract="model-format")
    section = config["model"]
    hyper = Hyperparams(float(section["lambda"]), int(section["latent_dim"]),
                        section.get("standardize", "false") == "true", section.get("solver", "dense"))
    names, kinds, encoders, standardizers = [], [], [], {}
    i = 0
    while config.has_section(f"modality:{i}"):
        entry = config[f"modality:{i}"]
        names.append(entry["name"])
        kinds.append(entry.get("kind", "semantic"))
        encoders.append(read_matrix_values(path / entry["encoder"]))
        if "mean" in entry:
            standardizers[entry["name"]] = Standardizer(read_matrix_values(path / entry["mean"]).ravel(),
                                                        read_matrix_values(path / entry["scale"]).ravel())
        i += 1
    if not names:
        raise ValidationError(f"{path} declares no modalities", contract="model-format")
    warnings = tuple(config["warnings"].values()) if config.has_section("warnings") else ()
    return LseModel(hyper, read_matrix_values(path / "code.lsem"), tuple(encoders), tuple(names),
                    read_matrix_values(path / "eigenvalues.lsem").ravel(), tuple(kinds), standardizers, warnings)
