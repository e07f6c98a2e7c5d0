"""Command-line entry point: ``neuronscope <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import attribution, clustering, evaluation, intervention
from .concept import ConceptCorpus, ConceptVector, concept_vector, read_jsonl
from .model import AblationMask, ModelConfig, PassCounter
from .model_io import (
    CONFIG_FILE,
    default_word_list,
    load_model,
    load_tokenizer,
    parse_word_arg,
    resolve_targets,
    resolve_weights_path,
    save_model,
    synth_model,
    synth_vocabulary,
)

log = logging.getLogger("neuronscope")


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# artifact helpers
# ---------------------------------------------------------------------------

def write_text_atomic(path, text: str):
    """Write to a sibling temp file then rename, so no half-written artifact survives."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_json(path, obj):
    write_text_atomic(path, json.dumps(obj, indent=2) + "\n")


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    write_text_atomic(path, buf.getvalue())


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CLIError(f"cannot read {path}: {e}") from e


def _int_list(s: str) -> list:
    return [int(x) for x in s.split(",") if x.strip()]


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _weights(args):
    if not args.weights:
        raise CLIError("--weights is required")
    path = resolve_weights_path(args.weights)
    config = None
    if args.config:
        config = ModelConfig.from_dict(_read_json(args.config))
    return load_model(path, config, precision=args.precision)


def _tokenizer(args):
    if args.tokenizer:
        return load_tokenizer(args.tokenizer)
    if args.weights:
        return load_tokenizer(resolve_weights_path(args.weights).parent)
    raise CLIError("--tokenizer is required")


def _targets(tokenizer, arg, policy, default=None):
    words = parse_word_arg(arg) if arg else default_word_list(default) if default else None
    if not words:
        raise CLIError("no target words given")
    ts = resolve_targets(tokenizer, words, policy)
    for word, reason in ts.dropped:
        log.warning("dropped target %r (%s)", word, reason)
    return ts


def _ranking(path) -> attribution.NeuronRanking:
    return attribution.NeuronRanking.from_json(_read_json(path))


def _texts(path, key="text"):
    return [row[key] for row in read_jsonl(path)]


def _require_out(args):
    if not args.out:
        raise CLIError("--out is required")
    return args.out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth_model(args):
    out = _require_out(args)
    cfg = ModelConfig(args.layers, args.d_model, args.heads, args.d_ffn, args.vocab, args.positions,
                      activation=args.activation)
    w = synth_model(args.seed, cfg, precision=args.precision)
    save_model(w, out, tokenizer_words=synth_vocabulary(cfg.vocab_size))
    print(f"wrote synthetic model to {out} (checksum {w.checksum()[:16]})")


def cmd_concept_vector(args):
    w, tok = _weights(args), _tokenizer(args)
    corpus = ConceptCorpus.from_jsonl(args.corpus, args.label)
    counter = PassCounter()
    c = concept_vector(w, tok, corpus, threads=args.threads, counter=counter)
    write_json(_require_out(args), c.to_json())
    print(f"audit: forward_passes={counter.count} examples={c.n_examples}")


def cmd_locate(args):
    w, tok = _weights(args), _tokenizer(args)
    c = ConceptVector.load(args.vector)
    targets = _targets(tok, args.targets, args.policy)
    counter = PassCounter()
    ranking = attribution.locate_concept_neurons(w, c, targets.ids, args.top, args.add_pos0,
                                                 args.threads, counter)
    write_json(_require_out(args), ranking.to_json())
    print(f"audit: forward_passes={counter.count} neurons_scored={w.config.n_neurons}")


def cmd_locate_bias(args):
    w, tok = _weights(args), _tokenizer(args)
    c = ConceptVector.load(args.vector)
    male = _targets(tok, args.male_words, args.policy, "male")
    female = _targets(tok, args.female_words, args.policy, "female")
    counter = PassCounter()
    ranking = attribution.locate_bias_neurons(w, c, male.ids, female.ids, args.top, args.direction,
                                              args.add_pos0, args.threads, counter)
    write_json(_require_out(args), ranking.to_json())
    print(f"audit: forward_passes={counter.count} neurons_scored={w.config.n_neurons}")


def cmd_baseline(args):
    w, tok = _weights(args), _tokenizer(args)
    sentences = _texts(args.sentences)
    if not 0 <= args.sentence_index < len(sentences):
        raise CLIError(f"--sentence-index {args.sentence_index} out of range")
    ids = tok.encode(sentences[args.sentence_index])
    if len(ids) < 2:
        raise CLIError("sentence needs at least 2 tokens")
    counter = PassCounter()
    ranking = attribution.baseline_scores(args.method, w, ids[:-1], args.top, args.threads, counter)
    write_json(_require_out(args), ranking.to_json())
    print(f"audit: forward_passes={counter.count} neurons_scored={w.config.n_neurons}")


def cmd_cluster(args):
    w, tok = _weights(args), _tokenizer(args)
    c = ConceptVector.load(args.vector)
    targets = _targets(tok, args.targets, args.policy)
    counter = PassCounter()
    trace = attribution.cache_concept_pass(w, c, targets.ids, args.add_pos0, counter)
    if args.mode == "forward":
        scores = trace.coeffs.astype(np.float64).reshape(-1)
    else:
        scores = clustering.coefficient_scores(w, c, "literal")
    effects, _ = attribution.effect_scores(trace, w, args.threads)
    assignment = clustering.kmeans_1d(scores, args.k, seed=args.seed, mode=args.mode)
    ranking = clustering.rank_clusters(assignment, effects)
    obj = assignment.to_json()
    obj["ranking"] = ranking.to_json()
    write_json(_require_out(args), obj)
    print(f"audit: forward_passes={counter.count} k={args.k} top_cluster={ranking.top} "
          f"size={ranking.sizes[ranking.top]}")


def cmd_mask(args):
    out = _require_out(args)
    chosen = [x is not None for x in (args.top_k, args.cluster, args.union)]
    if sum(chosen) != 1:
        raise CLIError("give exactly one of --top-k, --cluster, --union")
    if args.top_k is not None:
        if not args.ranking:
            raise CLIError("--top-k needs --ranking")
        mask = intervention.mask_from_ranking(_ranking(args.ranking), args.top_k)
    elif args.cluster is not None:
        if not args.assignment:
            raise CLIError("--cluster needs --assignment")
        obj = _read_json(args.assignment)
        assignment = clustering.ClusterAssignment.from_json(obj)
        ranking = _cluster_ranking_from_json(obj)
        d_ffn = args.d_ffn
        if d_ffn is None:
            if not args.weights:
                raise CLIError("--cluster needs --weights (or --d-ffn) to map neuron ids")
            d_ffn = _weights(args).config.d_ffn
        mask = clustering.cluster_mask(assignment, ranking, args.cluster, d_ffn)
    else:
        mask = intervention.union(*[intervention.load_mask(p) for p in args.union])
    write_json(out, mask.to_json())
    print(f"mask: {len(mask)} neurons")


def _cluster_ranking_from_json(obj):
    if "ranking" not in obj:
        raise CLIError("assignment file has no cluster ranking; re-run `cluster`")
    rows = obj["ranking"]
    return clustering.ClusterRanking(tuple(r["cluster"] for r in rows),
                                     {r["cluster"]: r["mean_effect"] for r in rows},
                                     {r["cluster"]: r["size"] for r in rows})


def _mask_arg(args, ranking_attr="ranking"):
    if getattr(args, "mask", None):
        return intervention.load_mask(args.mask)
    ranking = getattr(args, ranking_attr, None)
    if ranking:
        return intervention.mask_from_ranking(_ranking(ranking), args.top_k)
    return AblationMask()


def cmd_eval_hate(args):
    w, tok = _weights(args), _tokenizer(args)
    sentences = _texts(args.sentences)
    indices = _int_list(args.indices) if args.indices else None
    base = evaluation.eval_next_token(w, tok, AblationMask(), sentences, indices, args.threads)
    mask = _mask_arg(args)
    masked = evaluation.eval_next_token(w, tok, mask, sentences, indices, args.threads)
    write_json(_require_out(args), {"n_masked": len(mask), "mask": mask.to_json(),
                                    "original": base.to_json(), "masked": masked.to_json()})
    if args.csv:
        write_csv(args.csv, ["sentence", "MRR", "Prob", "LogP", "Rank"],
                  [[r.index, r.mrr, r.prob, r.logp, r.rank] for r in masked.rows])
    print(f"MRR_avg={masked.mrr_avg:.6g} Prob_avg={masked.prob_avg:.6g} LogP_avg={masked.logp_avg:.6g}")


def _bias_rankings(args):
    male = _ranking(args.male_ranking) if args.male_ranking else None
    female = _ranking(args.female_ranking) if args.female_ranking else None
    if male is None and female is None:
        raise CLIError("need --male-ranking and/or --female-ranking")
    return male, female


def _sweep_masks(args, with_union=False):
    male, female = _bias_rankings(args)
    masks = [("Original", AblationMask())]
    for name, ranking in (("Male", male), ("Female", female)):
        if ranking is None:
            continue
        for k in _int_list(args.sweep):
            masks.append((f"{k} {name}", intervention.mask_from_ranking(ranking, k)))
    if with_union and male is not None and female is not None:
        masks.append(("1 Male + 1 Female", intervention.union(
            intervention.mask_from_ranking(male, 1), intervention.mask_from_ranking(female, 1))))
    return masks


def cmd_eval_bias(args):
    w, tok = _weights(args), _tokenizer(args)
    bios = [(row["text"], int(row["gender"])) for row in read_jsonl(args.bios)]
    male = _targets(tok, args.male_words, args.policy, "male")
    female = _targets(tok, args.female_words, args.policy, "female")
    rows = []
    for setting, mask in _sweep_masks(args):
        r = evaluation.eval_resolution(w, tok, mask, bios, male.ids, female.ids, args.threads)
        rows.append({"setting": setting, "n_masked": len(mask), **{k: v for k, v in r.to_json().items()
                                                                    if k != "predictions"}})
    write_json(_require_out(args), {"rows": rows})
    if args.csv:
        write_csv(args.csv, ["setting", "male_acc", "female_acc", "avg_acc", "gap"],
                  [[r["setting"], r["ResAcc_male"], r["ResAcc_female"], r["ResAcc_avg"], r["Gap"]] for r in rows])
    for r in rows:
        print(f"{r['setting']:>12}: male={r['ResAcc_male']:.4f} female={r['ResAcc_female']:.4f} "
              f"avg={r['ResAcc_avg']:.4f} gap={r['Gap']:.4f}")


def cmd_eval_stereo(args):
    w, tok = _weights(args), _tokenizer(args)
    pairs = [(row["stereo"], row["anti"]) for row in read_jsonl(args.pairs)]
    rows = []
    for setting, mask in _sweep_masks(args, with_union=True):
        r = evaluation.eval_stereotype_pairs(w, tok, mask, pairs, args.normalization, args.threads)
        rows.append({"setting": setting, "n_masked": len(mask),
                     **{k: v for k, v in r.to_json().items() if k != "rows"}})
    write_json(_require_out(args), {"rows": rows})
    if args.csv:
        write_csv(args.csv, ["setting", "total", "S_cnt", "A_cnt", "S_pct", "A_pct"],
                  [[r["setting"], r["total"], r["S_cnt"], r["A_cnt"], r["S_pct"], r["A_pct"]] for r in rows])
    for r in rows:
        print(f"{r['setting']:>18}: S={r['S_cnt']} A={r['A_cnt']} E={r['E_cnt']} "
              f"S%={r['S_pct']:.1f} A%={r['A_pct']:.1f}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--weights", help="safetensors file, model directory, or name under $NEURONSCOPE_CACHE")
    g.add_argument("--tokenizer", help="directory with vocab.json+merges.txt or words.txt (default: weights dir)")
    g.add_argument("--config", help=f"model config JSON (default: {CONFIG_FILE} next to the weights)")
    g.add_argument("--precision", choices=("standard", "wide"), default="standard",
                   help="float32 (standard) or float64 (wide) forward kernels")
    g.add_argument("--threads", type=int, default=1, help="worker threads; 1 forces the sequential path")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="output artifact path")
    g.add_argument("--add-pos0", action="store_true",
                   help="add the position-0 embedding when feeding a concept vector")
    g.add_argument("--policy", choices=("first_subtoken", "strict"), default="first_subtoken",
                   help="how multi-token target words are handled")
    g.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="neuronscope", description="Concept-neuron attribution for GPT-2 style models.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, parents=[common], help=help, description=help)
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth-model", cmd_synth_model, "write a deterministic synthetic model + word vocabulary")
    sp.add_argument("--layers", type=int, default=2)
    sp.add_argument("--d-model", type=int, default=8)
    sp.add_argument("--heads", type=int, default=2)
    sp.add_argument("--d-ffn", type=int, default=16)
    sp.add_argument("--vocab", type=int, default=50)
    sp.add_argument("--positions", type=int, default=32)
    sp.add_argument("--activation", choices=("gelu_new", "gelu"), default="gelu_new")

    sp = add("concept-vector", cmd_concept_vector, "build a concept vector from a JSONL corpus")
    sp.add_argument("--corpus", required=True, help='JSONL lines {"text": ..., "label": ...}')
    sp.add_argument("--label", help="keep only examples with this label")

    sp = add("locate", cmd_locate, "rank neurons by target effect score for a concept vector")
    sp.add_argument("--vector", required=True)
    sp.add_argument("--targets", required=True, help="word-list file or comma separated words")
    sp.add_argument("--top", type=int, default=10)

    sp = add("locate-bias", cmd_locate_bias, "rank male- or female-stereotypical neurons")
    sp.add_argument("--vector", required=True, help="c_M for --direction male, c_F for female")
    sp.add_argument("--direction", choices=("male", "female"), required=True)
    sp.add_argument("--male-words", help="default: shipped masculine list")
    sp.add_argument("--female-words", help="default: shipped feminine list")
    sp.add_argument("--top", type=int, default=11)

    sp = add("baseline", cmd_baseline, "rank neurons on one sentence with baseline a..g")
    sp.add_argument("--method", choices=attribution.BASELINE_METHODS, required=True)
    sp.add_argument("--sentences", required=True, help='JSONL lines {"text": ...}')
    sp.add_argument("--sentence-index", type=int, default=0)
    sp.add_argument("--top", type=int, default=10)

    sp = add("cluster", cmd_cluster, "k-means over coefficient scores and rank clusters by mean effect")
    sp.add_argument("--vector", required=True)
    sp.add_argument("--targets", required=True)
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--mode", choices=clustering.MODES, default="forward")

    sp = add("mask", cmd_mask, "build an ablation mask file")
    sp.add_argument("--ranking", help="ranking JSON for --top-k")
    sp.add_argument("--top-k", type=int)
    sp.add_argument("--assignment", help="cluster JSON for --cluster")
    sp.add_argument("--cluster", help="'top', 'complement' or a cluster id")
    sp.add_argument("--d-ffn", type=int, help="FFN width, instead of reading --weights")
    sp.add_argument("--union", nargs="+", metavar="MASK", help="mask files to merge")

    sp = add("eval-hate", cmd_eval_hate, "last-token MRR/Prob/LogP before and after masking")
    sp.add_argument("--sentences", required=True)
    sp.add_argument("--mask")
    sp.add_argument("--ranking")
    sp.add_argument("--top-k", type=int, default=10)
    sp.add_argument("--indices", help="comma separated sentence indices (default: all)")
    sp.add_argument("--csv")

    for name, fn, help in (("eval-bias", cmd_eval_bias, "gender resolution accuracy sweep"),
                           ("eval-stereo", cmd_eval_stereo, "stereotype-pair preference sweep")):
        sp = add(name, fn, help)
        sp.add_argument("--male-ranking")
        sp.add_argument("--female-ranking")
        sp.add_argument("--sweep", default="1,3,5,7,9,11")
        sp.add_argument("--csv")
        if name == "eval-bias":
            sp.add_argument("--bios", required=True, help='JSONL lines {"text": ..., "gender": 0|1}')
            sp.add_argument("--male-words")
            sp.add_argument("--female-words")
        else:
            sp.add_argument("--pairs", required=True, help='JSONL lines {"stereo": ..., "anti": ...}')
            sp.add_argument("--normalization", choices=("sum", "mean"), default="sum")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
