import wave

import numpy as np
import pytest

from sskws.config import config_from_dict
from sskws.data import SplitSpec, ingest_speech_commands, save_classes, split_label_deficient
from sskws.synth import synth_corpus


def write_pcm_wav(path, samples_i16, sample_rate=16000, channels=1, sampwidth=2):
    """Write raw int16 (or other width) PCM directly, for exact-value tests."""
    arr = np.asarray(samples_i16)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(sampwidth)
        wf.setframerate(sample_rate)
        wf.writeframes(arr.astype(f"<i{sampwidth}" if sampwidth != 1 else "u1").tobytes())


@pytest.fixture(scope="session")
def mini_setup(tmp_path_factory):
    """Small 3-keyword corpus with manifests, shared by pipeline-level tests."""
    td = tmp_path_factory.mktemp("mini")
    root = synth_corpus(td / "corpus", n_keywords=3, train_per_class=30, val_per_class=5,
                        test_per_class=5, seed=7)
    manifests = ingest_speech_commands(root)
    man_dir = td / "manifests"
    man_dir.mkdir()
    save_classes(manifests["train"].class_map, man_dir / "classes.txt")
    for name, m in manifests.items():
        m.save(man_dir / f"{name}.csv")
    pre, lab = split_label_deficient(manifests["train"], SplitSpec(0.8, seed=1))
    pre.save(man_dir / "pretrain.csv")
    lab.save(man_dir / "labelled.csv")
    return {"root": root, "man_dir": man_dir, "manifests": manifests}


def base_config_dict(setup, out_dir, **overrides):
    man = setup["man_dir"]
    doc = {
        "seed": 3,
        "task": "train",
        "out_dir": str(out_dir),
        "deterministic": True,
        "model": {"variant": "tiny"},
        "data": {
            "data_root": str(setup["root"]),
            "train_manifest": str(man / "labelled.csv"),
            "val_manifest": str(man / "validation.csv"),
            "test_manifest": str(man / "test.csv"),
            "classes_file": str(man / "classes.txt"),
        },
        "train": {"epochs": 2, "batch_size": 16, "eta_max": 1e-3, "warmup_epochs": 0.5},
        "augment": {"enabled": True, "max_time_mask": 10, "max_freq_mask": 4},
        "pretrain": {"epochs": 2, "batch_size": 16, "eta_peak": 1e-3, "p_mask": 0.08,
                     "n_mask": 10, "top_k": 2},
    }
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(doc.get(key), dict):
            doc[key] = {**doc[key], **val}
        else:
            doc[key] = val
    return doc


@pytest.fixture
def base_config(mini_setup, tmp_path):
    def make(**overrides):
        out = overrides.pop("out_dir", tmp_path / "run")
        return config_from_dict(base_config_dict(mini_setup, out, **overrides))

    return make
