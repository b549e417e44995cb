"""Smoke test for the foleygen_py extension module.

Builds the extension with cargo when no compiled library is found, loads it
from a temporary directory and exercises the DSP helpers, the robust loss,
corpus generation and the command-line entry point.

    python3 python/smoke_test.py
"""

import json
import math
import os
import random
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def locate_library():
    for profile in ("release", "debug"):
        path = os.path.join(ROOT, "target", profile, "libfoleygen_py.so")
        if os.path.exists(path):
            return path
    return None


def load_module(workdir):
    lib = locate_library()
    if lib is None or os.environ.get("FOLEYGEN_REBUILD"):
        subprocess.run(
            ["cargo", "build", "-p", "foleygen-py", "--features", "extension-module"],
            cwd=ROOT,
            check=True,
        )
        lib = locate_library()
    shutil.copy(lib, os.path.join(workdir, "foleygen_py.so"))
    sys.path.insert(0, workdir)
    import foleygen_py

    return foleygen_py


def main():
    with tempfile.TemporaryDirectory() as work:
        fg = load_module(work)
        rng = random.Random(5)
        sr = 8000
        x = [rng.uniform(-1, 1) for _ in range(sr)]

        y = fg.stft_roundtrip(x, sr)
        interior = range(256, len(y) - 256)
        err = max(abs(x[i] - y[i]) for i in interior)
        assert err < 1e-6, err

        spec = fg.spectrogram(x, sr, mode="magnitude")
        assert len(spec[0]) == 129
        _, rel = fg.griffin_lim(spec, sr, iterations=16)
        assert len(rel) == 16 and rel[-1] <= rel[0] + 1e-9

        assert abs(fg.robust_loss(1.0, 1.0) - math.log(2)) < 1e-12
        assert abs(fg.robust_loss(0.0, 0.5) - math.log(0.5)) < 1e-12
        assert abs(fg.normalized_cross_correlation(x, x, sr) - 1.0) < 1e-9

        wav = os.path.join(work, "x.wav")
        fg.write_wav(wav, x[:400], sr)
        back, rate = fg.read_wav(wav)
        assert rate == sr and len(back) == 400

        corpus = os.path.join(work, "corpus")
        assert fg.generate_corpus(corpus, clips_per_class=2, seed=1) == 24
        manifest = os.path.join(corpus, "manifest.tsv")
        out = json.loads(fg.run_cli(["--json", "build-bank", "--manifest", manifest, "--out", os.path.join(work, "bank.bin")]))
        assert out["classes"] == 12 and out["bins"] == 129

        try:
            fg.run_cli(["synth", "--ckpt", "missing.ckpt", "--clip", "nope", "--manifest", manifest, "--out", wav])
        except KeyError as e:
            assert "unknown clip" in str(e)
        else:
            raise AssertionError("unknown clip accepted")

        print("python smoke test passed (foleygen_py %s)" % fg.__version__)


if __name__ == "__main__":
    main()
