"""Smoke test for the `dualora` extension module.

Build with `cargo build --release -p dualora-py`, then run from the repo root:

    python python/smoke_test.py

The script copies target/release/libdualora.so to a temp dir as dualora.so
unless the module is already importable (e.g. installed with maturin).
"""

import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_dualora():
    try:
        import dualora
        return dualora
    except ImportError:
        pass
    for name in ("libdualora.so", "libdualora.dylib"):
        built = os.path.join(ROOT, "target", "release", name)
        if os.path.exists(built):
            tmp = tempfile.mkdtemp()
            shutil.copy(built, os.path.join(tmp, "dualora.so"))
            sys.path.insert(0, tmp)
            import dualora
            return dualora
    sys.exit("dualora extension not built; run `cargo build --release -p dualora-py`")


def main():
    dl = import_dualora()

    s = dl.generate_sample(7)
    assert len(s.vocal) == len(s.mixture) > 0
    assert len(s.vocal[0]) == 16
    assert dl.detokenize(dl.tokenize(s.text)) == s.text
    print(f"sample {s.id} [{s.language}] {s.text!r} frames={len(s.vocal)} gain={s.gain:.3f}")

    d = dl.wer("the cat sat", "the bat sat down")
    assert (d.substitutions, d.deletions, d.insertions, d.ref_words) == (1, 0, 1, 3)
    assert abs(d.wer - 2 / 3) < 1e-12
    assert dl.normalize_text("Hello,  World!") == "hello world"
    assert dl.learning_rate(0, 100, 1e-3, 0.1) >= 0.0

    m = dl.Model(seed=0)
    assert not m.has_adapters()
    losses = m.pretrain(steps=20, samples=32)
    assert len(losses) == 20
    base = m.base_digest()
    ft = m.finetune("cns-l2-w1.0", steps=10, samples=16)
    assert len(ft) == 10 and m.has_adapters()
    assert m.base_digest() == base, "fine-tuning touched the base weights"
    print("adapters on:", ", ".join(m.adapter_targets()[:3]), "...")

    text = m.transcribe(s.mixture + s.mixture, window_frames=32)
    print("transcript:", repr(text))

    path = os.path.join(tempfile.mkdtemp(), "model.ckpt")
    m.save(path)
    again = dl.Model.load(path)
    assert again.digest() == m.digest()
    assert again.greedy_decode(s.vocal) == m.greedy_decode(s.vocal)
    print("ok")


if __name__ == "__main__":
    main()
