#!/usr/bin/env python3
"""Smoke test for the pastfuture_py extension module.

Builds nothing itself: expects the cdylib under target/debug or
target/release (``cargo build -p pastfuture-py``). Copies it into a temp
directory under the importable name, then exercises the whole surface:
corpus generation, training, translation, scoring, alignment, metrics,
and a gradient check.
"""

import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_module():
    candidates = [
        os.path.join(ROOT, "target", profile, name)
        for profile in ("release", "debug")
        for name in ("libpastfuture_py.so", "pastfuture_py.so", "libpastfuture_py.dylib")
    ]
    built = next((c for c in candidates if os.path.exists(c)), None)
    if built is None:
        sys.exit("cdylib not found; run `cargo build -p pastfuture-py` first")
    stage = tempfile.mkdtemp(prefix="pastfuture_py_")
    shutil.copy(built, os.path.join(stage, "pastfuture_py.so"))
    sys.path.insert(0, stage)
    import pastfuture_py

    return pastfuture_py


def check(name, ok, detail=""):
    status = "ok" if ok else "FAIL"
    print(f"{status:4s} {name} {detail}")
    if not ok:
        sys.exit(1)


def main():
    pf = import_module()
    work = tempfile.mkdtemp(prefix="pastfuture_smoke_")

    # Metric hand values.
    bleu = pf.corpus_bleu(["a b c d e"], ["a b c d f"])
    check("bleu hand case", abs(bleu - 66.87) < 0.01, f"bleu={bleu:.2f}")
    check("bleu perfect", pf.corpus_bleu(["x y"], ["x y"]) == 100.0)
    aer = pf.aer([[(1, 1), (2, 2)]], [[(1, 1)]], [[(1, 1), (2, 3)]])
    check("aer hand case", abs(aer - 100.0 / 3.0) < 1e-9, f"aer={aer:.2f}")

    # Synthetic corpus on disk.
    src, tgt, aligns = pf.gen_synthetic("copy", vocab_size=12, len_min=3, len_max=6,
                                        n_pairs=60, seed=3)
    check("gen_synthetic shapes", len(src) == len(tgt) == len(aligns) == 60)
    check("copy task copies", all(s == t for s, t in zip(src, tgt)))
    paths = {}
    for name, lines in [("train.src", src[:50]), ("train.tgt", tgt[:50]),
                        ("dev.src", src[50:]), ("dev.tgt", tgt[50:])]:
        paths[name] = os.path.join(work, name)
        with open(paths[name], "w") as f:
            f.write("\n".join(lines) + "\n")

    # A short training run; convergence is not the point here.
    ckpt = os.path.join(work, "model.ckpt.json")
    metrics = pf.train(paths["train.src"], paths["train.tgt"],
                       paths["dev.src"], paths["dev.tgt"], ckpt,
                       preset="+frnn+prnn+loss", emb_dim=6, hidden_dim=8,
                       vocab_size=12, epochs=3, lr=2e-3, seed=7)
    check("train epochs", len(metrics) == 3, f"dev nll {metrics[-1][1]:.3f}")
    check("train losses finite",
          all(math.isfinite(a) and math.isfinite(b) for a, b in metrics))
    check("checkpoint written", os.path.exists(ckpt))

    model = pf.Model.load(ckpt)
    hyps = model.translate_many(src[50:], beam=3)
    check("translate_many count", len(hyps) == 10)
    one = model.translate(src[50], beam=3)
    check("translate matches batch", one == hyps[0])
    score = model.score(src[50], tgt[50])
    check("score finite and positive", math.isfinite(score) and score > 0.0,
          f"nll={score:.3f}")
    links = model.alignment(src[50], beam=3)
    n_src = len(src[50].split())
    check("alignment links well-formed",
          all(1 <= i <= n_src for _, i in links), f"{len(links)} links")

    over, under = pf.coverage(tgt[50:], hyps)
    check("coverage ratios in range", 0.0 <= over <= 1.0 and 0.0 <= under <= 1.0,
          f"over={over:.3f} under={under:.3f}")

    err = pf.gradcheck("+frnn+prnn+loss", dim=5, emb=4, vocab=9, seed=1)
    check("gradcheck", err < 1e-4, f"max rel err {err:.2e}")

    print("smoke test passed")


if __name__ == "__main__":
    main()
