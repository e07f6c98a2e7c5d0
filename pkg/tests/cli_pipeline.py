"""A complete CLI pipeline on a synthetic model, shared by the CLI and acceptance tests."""

import json
from pathlib import Path

from neuronscope.cli import run

CORPUS = ["they hate people", "the cruel man", "we hate the people", "bad people always hate"]
SENTENCES = ["he is a king", "she is a nurse", "the people hate the woman", "his father is a doctor"]
BIOS = [("he is a", 0), ("she is a", 1), ("his father was", 0), ("her mother was a", 1)]
PAIRS = [("she is a nurse", "he is a nurse"), ("he is a doctor", "she is a doctor")]


def write_jsonl(path, rows):
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in rows))


def cli(*argv):
    code = run([str(a) for a in argv])
    assert code == 0, f"command failed: {argv}"


def run_pipeline(root, seed=0) -> dict:
    """Run every subcommand once; return {name: path} of the artifacts written."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    model = root / "model"
    write_jsonl(root / "corpus.jsonl", [{"text": t, "label": "hate"} for t in CORPUS])
    write_jsonl(root / "sents.jsonl", [{"text": t} for t in SENTENCES])
    write_jsonl(root / "bios.jsonl", [{"text": t, "gender": g} for t, g in BIOS])
    write_jsonl(root / "pairs.jsonl", [{"stereo": s, "anti": a} for s, a in PAIRS])
    g = ["--weights", model, "--precision", "wide", "--seed", seed]
    out = {n: root / f"{n}.json" for n in
           ("concept", "ranking", "male", "female", "baseline", "cluster", "mask", "cmask", "umask",
            "hate", "bias", "stereo")}
    cli("synth-model", "--out", model, "--seed", seed, "--precision", "wide")
    cli("concept-vector", *g, "--corpus", root / "corpus.jsonl", "--out", out["concept"])
    cli("locate", *g, "--vector", out["concept"], "--targets", "hate,cruel,bad", "--top", 10,
        "--out", out["ranking"])
    for d in ("male", "female"):
        cli("locate-bias", *g, "--vector", out["concept"], "--direction", d, "--out", out[d])
    cli("baseline", *g, "--method", "c", "--sentences", root / "sents.jsonl", "--sentence-index", 2,
        "--out", out["baseline"])
    cli("cluster", *g, "--vector", out["concept"], "--targets", "hate,cruel,bad", "--k", 4,
        "--out", out["cluster"])
    cli("mask", "--ranking", out["ranking"], "--top-k", 5, "--out", out["mask"])
    cli("mask", "--assignment", out["cluster"], "--cluster", "top", "--d-ffn", 16, "--out", out["cmask"])
    cli("mask", "--union", out["mask"], out["cmask"], "--out", out["umask"])
    cli("eval-hate", *g, "--sentences", root / "sents.jsonl", "--mask", out["mask"], "--out", out["hate"],
        "--csv", root / "hate.csv")
    cli("eval-bias", *g, "--bios", root / "bios.jsonl", "--male-ranking", out["male"],
        "--female-ranking", out["female"], "--out", out["bias"])
    cli("eval-stereo", *g, "--pairs", root / "pairs.jsonl", "--male-ranking", out["male"],
        "--female-ranking", out["female"], "--out", out["stereo"])
    out["hate_csv"] = root / "hate.csv"
    for name in ("model.safetensors", "config.json", "words.txt"):
        out[name] = model / name
    return out
