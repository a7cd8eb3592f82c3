"""Operator entry point: train / eval / label / route / bench / report.

Every command reads one YAML config (sections per module), honors the global
--seed/--out/--mock flags, and writes JSON reports that embed the resolved
config, so a run is a pure function of (config, seed, data, transcript).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import torch
import yaml

from .bench import (
    measure_latency,
    measure_throughput,
    model_batch_step,
    model_latency_step,
    write_timing_log,
)
from .compacter import CompacterConfig
from .data import (
    ENTITY_TYPES,
    TAG_VOCAB,
    balanced_sample,
    load_aptner,
    load_dga,
    load_spam,
    plain_split,
    stratified_split,
    suspicious_o_tokens,
    synth_apt_sentences,
    synth_domain_examples,
    synth_spam_examples,
    write_classification_csv,
    write_qc_report,
)
from .encoder import (
    CharTokenizer,
    EncoderDescriptor,
    TransformerEncoderModel,
    WordTokenizer,
    export_base_checkpoint,
    export_delta_checkpoint,
    insert_compacters,
    load_base_checkpoint,
    load_delta_checkpoint,
)
from .freeze import HeadSpec, plan_for_strategy
from .gateway import (
    TEMPLATES,
    AdversarialTransport,
    LLMEndpointConfig,
    NoisyOracleTransport,
    OracleTransport,
    ScriptedTransport,
    TokenOracleTransport,
)
from .labeling import agreement_report, label_dataset, label_token_sentences, token_agreement_report
from .routing import RouterConfig, predictions_from_model, route_and_merge, write_routing_transcript
from .seeds import substream
from .training import MAX_SEQ_LEN, TASK_LABELS, TrainConfig, encode_dataset, evaluate, train

logger = logging.getLogger(__name__)

TASKS = ("spam", "dga", "cti")


class ConfigError(ValueError):
    pass


def load_config(path: str, seed_override: int | None = None,
                out_override: str | None = None) -> dict:
    with open(path, encoding="utf-8") as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    if seed_override is not None:
        cfg["seed"] = seed_override
    if out_override is not None:
        cfg["output_dir"] = out_override
    cfg.setdefault("seed", 0)
    cfg.setdefault("output_dir", "runs/out")
    task = cfg.get("task")
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    cfg.setdefault("strategy", "even_lc")
    for section in ("encoder", "compacter", "train", "data", "llm", "router", "bench"):
        cfg.setdefault(section, {})
        if not isinstance(cfg[section], dict):
            raise ConfigError(f"section {section} must be a mapping")
    return cfg


def _encoder_descriptor(cfg: dict, vocab_size: int) -> EncoderDescriptor:
    enc = cfg["encoder"]
    return EncoderDescriptor(
        num_layers=enc.get("num_layers", 12),
        hidden_dim=enc.get("hidden_dim", 64),
        num_heads=enc.get("num_heads", 4),
        ffn_dim=enc.get("ffn_dim", 256),
        vocab_size=enc.get("vocab_size") or vocab_size,
        max_positions=enc.get("max_positions", 128),
        type_vocab_size=enc.get("type_vocab_size", 2),
        head_style=enc.get("head_style", "pooled_linear"),
    )


def _compacter_config(cfg: dict, hidden_dim: int) -> CompacterConfig:
    c = cfg["compacter"]
    return CompacterConfig(
        hidden_dim=hidden_dim,
        reduction_factor=c.get("reduction_factor", 16),
        n=c.get("n", 4),
        rank=c.get("rank", 1),
        init_range=float(c.get("init_range", 1e-4)),
        nonlinearity=c.get("nonlinearity", "gelu"),
        placement_variant=c.get("placement_variant", "after_ffn_only"),
    )


def _train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        learning_rate=float(t.get("learning_rate", 5e-5)),
        epochs=int(t.get("epochs", 3)),
        batch_size=int(t.get("batch_size", 8)),
        max_seq_len=int(t.get("max_seq_len") or MAX_SEQ_LEN[cfg["task"]]),
        seed=substream(cfg["seed"], "train"),
        weight_decay=float(t.get("weight_decay", 0.01)),
    )


def _endpoint(cfg: dict, mock: str | None = None) -> LLMEndpointConfig:
    l = cfg["llm"]
    # scripted transcripts are consumed in call order: keep those sequential
    in_flight = 1 if mock == "scripted" else int(l.get("max_in_flight", 4))
    return LLMEndpointConfig(
        base_url=l.get("base_url", "http://localhost:8080/v1/chat/completions"),
        model=l.get("model", "gpt-4"),
        credential_env=l.get("credential_env", "LLM_API_KEY"),
        timeout_s=float(l.get("timeout_s", 30.0)),
        max_retries=int(l.get("max_retries", 3)),
        backoff_base_s=float(l.get("backoff_base_s", 0.5)),
        max_in_flight=in_flight,
    )


def load_task_data(cfg: dict):
    """(train, test) split per the config; synthetic generators when no paths."""
    task = cfg["task"]
    data = cfg["data"]
    seed = substream(cfg["seed"], "data")
    split_seed = substream(cfg["seed"], "split")
    test_fraction = float(data.get("test_fraction", 0.2))
    if task == "spam":
        if data.get("spam_csv"):
            examples = load_spam(data["spam_csv"]).examples
        else:
            examples = synth_spam_examples(int(data.get("synthetic", {}).get("n", 400)), seed)
        return stratified_split(examples, test_fraction, split_seed)
    if task == "dga":
        if data.get("dga_benign") and data.get("dga_malicious"):
            examples = load_dga(data["dga_benign"], data["dga_malicious"], seed=seed).examples
        else:
            n = int(data.get("synthetic", {}).get("n", 400))
            examples = synth_domain_examples(n // 2, n - n // 2, seed)
        return stratified_split(examples, test_fraction, split_seed)
    if data.get("aptner"):
        sentences = load_aptner(data["aptner"]).examples
    else:
        sentences = synth_apt_sentences(int(data.get("synthetic", {}).get("n", 200)), seed)
    return plain_split(sentences, test_fraction, split_seed)


def build_tokenizer(task: str, train_examples, run_dir: str | None = None):
    if task == "dga":
        tok = CharTokenizer()
        meta = {"kind": "char"}
    elif task == "cti":
        texts = [" ".join(s.tokens) for s in train_examples]
        tok = WordTokenizer.fit(texts)
        meta = {"kind": "word", "vocab": tok.to_dict()}
    else:
        tok = WordTokenizer.fit([e.text for e in train_examples])
        meta = {"kind": "word", "vocab": tok.to_dict()}
    if run_dir:
        with open(os.path.join(run_dir, "tokenizer.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh)
    return tok


def load_tokenizer(run_dir: str):
    with open(os.path.join(run_dir, "tokenizer.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta["kind"] == "char":
        return CharTokenizer()
    return WordTokenizer(meta["vocab"])


def _head_spec(cfg: dict, task: str) -> HeadSpec:
    style = cfg["encoder"].get("head_style", "pooled_linear")
    if task == "cti":
        return HeadSpec("token_classification", len(TAG_VOCAB), style)
    return HeadSpec("sequence_classification", 2, style)


def build_model(cfg: dict, tokenizer):
    desc = _encoder_descriptor(cfg, tokenizer.vocab_size)
    base_path = cfg["encoder"].get("base_checkpoint")
    if base_path:
        encoder = load_base_checkpoint(base_path)
    else:
        encoder = TransformerEncoderModel(desc, seed=substream(cfg["seed"], "encoder-init"))
    plan = plan_for_strategy(cfg["strategy"], encoder.desc.num_layers)
    comp = _compacter_config(cfg, encoder.desc.hidden_dim)
    head = _head_spec(cfg, cfg["task"])
    return insert_compacters(encoder, plan, comp, head,
                             seed=substream(cfg["seed"], "compacter-init"))


def write_report(cfg: dict, run_dir: str, name: str, payload: dict) -> str:
    os.makedirs(run_dir, exist_ok=True)
    payload = {"config": cfg, "seed": cfg["seed"], **payload}
    path = os.path.join(run_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
    return path


def make_mock_transport(mock: str, cfg: dict, split):
    """--mock oracle | noisy:p | adversarial | scripted, with gold from the data."""
    task = cfg["task"]
    if mock == "scripted":
        path = cfg["llm"].get("transcript")
        if not path:
            raise ConfigError("scripted mock needs llm.transcript (JSON array of replies)")
        with open(path, encoding="utf-8") as fh:
            return ScriptedTransport(json.load(fh))
    examples = list(split.train) + list(split.test)
    if task == "cti":
        if mock != "oracle":
            raise ConfigError(f"token task supports only the oracle mock, got {mock!r}")
        return TokenOracleTransport(examples)
    gold = {e.text: e.label for e in examples}
    labels = TASK_LABELS[task]
    if mock == "oracle":
        return OracleTransport(gold)
    if mock == "adversarial":
        return AdversarialTransport(gold, labels)
    if mock.startswith("noisy:"):
        p = float(mock.split(":", 1)[1])
        return NoisyOracleTransport(gold, labels, p, seed=substream(cfg["seed"], "mock-noise"))
    raise ConfigError(f"unknown mock {mock!r}")


def _replay_logger(cfg: dict):
    from .gateway import ReplayLogger

    path = cfg["llm"].get("replay_log")
    return ReplayLogger(path) if path else None


def _default_template(cfg: dict):
    name = cfg["llm"].get("template")
    if name:
        if name not in TEMPLATES:
            raise ConfigError(f"unknown template {name!r}; have {sorted(TEMPLATES)}")
        return TEMPLATES[name]
    return TEMPLATES[{"spam": "spam", "dga": "dga", "cti": "cti_detailed"}[cfg["task"]]]


def _entity_catalog():
    return list(ENTITY_TYPES.items())


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    run_dir = cfg["output_dir"]
    os.makedirs(run_dir, exist_ok=True)
    split = load_task_data(cfg)
    tokenizer = build_tokenizer(cfg["task"], split.train, run_dir)
    model = build_model(cfg, tokenizer)
    tc = _train_config(cfg)
    train_data = encode_dataset(cfg["task"], split.train, tokenizer, tc.max_seq_len)
    test_data = encode_dataset(cfg["task"], split.test, tokenizer, tc.max_seq_len)
    result = train(model, train_data, tc)
    report = evaluate(model, test_data, result.report)
    export_base_checkpoint(model.encoder, os.path.join(run_dir, "base"))
    export_delta_checkpoint(model, os.path.join(run_dir, "delta"))
    if cfg["task"] == "cti":
        findings = suspicious_o_tokens(list(split.train) + list(split.test))
        write_qc_report({"suspicious_o_tokens": findings},
                        os.path.join(run_dir, "data_qc.json"))
    path = write_report(cfg, run_dir, "report.json", {
        "command": "train",
        "task": cfg["task"],
        "strategy": cfg["strategy"],
        "metrics": report.to_dict(),
        "mask": model.mask.summary(),
        "split": {"train": len(split.train), "test": len(split.test),
                  "provenance": split.provenance},
    })
    print(f"train: f1={report.f1:.4f} trainable={100 * report.trainable_fraction:.4f}% "
          f"wall={report.wall_time_seconds:.2f}s -> {path}")
    return 0


def _load_trained(cfg: dict, run_dir: str):
    tokenizer = load_tokenizer(run_dir)
    encoder = load_base_checkpoint(os.path.join(run_dir, "base"))
    model = load_delta_checkpoint(os.path.join(run_dir, "delta"), encoder)
    return tokenizer, model


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    run_dir = cfg["output_dir"]
    tokenizer, model = _load_trained(cfg, args.model_dir or run_dir)
    split = load_task_data(cfg)
    tc = _train_config(cfg)
    test_data = encode_dataset(cfg["task"], split.test, tokenizer, tc.max_seq_len)
    report = evaluate(model, test_data)
    path = write_report(cfg, run_dir, "eval_report.json", {
        "command": "eval", "task": cfg["task"], "strategy": cfg["strategy"],
        "metrics": report.to_dict(),
    })
    print(f"eval: f1={report.f1:.4f} -> {path}")
    return 0


def cmd_label(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    run_dir = cfg["output_dir"]
    os.makedirs(run_dir, exist_ok=True)
    split = load_task_data(cfg)
    endpoint = _endpoint(cfg, args.mock)
    template = _default_template(cfg)
    transport = make_mock_transport(args.mock, cfg, split) if args.mock else None
    replay = _replay_logger(cfg)
    task = cfg["task"]
    outputs = {}
    if task == "cti":
        labelled = label_token_sentences(split.train, template, endpoint, TAG_VOCAB,
                                         _entity_catalog(), transport=transport,
                                         replay_log=replay)
        agreement = None
        if labelled.qc["coverage"] == 1.0:
            agreement = token_agreement_report(labelled.examples, list(split.train)).to_dict()
        out_path = os.path.join(run_dir, "labelled_conll.txt")
        with open(out_path, "w", encoding="utf-8") as fh:
            for sent in labelled.examples:
                for token, tag in zip(sent.tokens, sent.tags):
                    fh.write(f"{token} {tag}\n")
                fh.write("\n")
        outputs["labelled_conll"] = out_path
    else:
        gold = list(split.train)
        labelled = label_dataset([e.text for e in gold], template, endpoint,
                                 TASK_LABELS[task], transport=transport,
                                 replay_log=replay)
        agreement = None
        if labelled.qc["coverage"] == 1.0:
            agreement = agreement_report(labelled.examples, gold).to_dict()
        if task == "dga":
            # two one-domain-per-line files, the exact shape load_dga ingests
            for label, name in (("Non-DGA", "labelled_benign.txt"), ("DGA", "labelled_dga.txt")):
                path = os.path.join(run_dir, name)
                with open(path, "w", encoding="utf-8") as fh:
                    for ex in labelled.examples:
                        if ex.label == label:
                            fh.write(ex.text + "\n")
                outputs[name] = path
        else:
            out_csv = os.path.join(run_dir, "labelled.csv")
            write_classification_csv(labelled.examples, out_csv)
            outputs["labelled_csv"] = out_csv
    write_qc_report(labelled.qc, os.path.join(run_dir, "label_qc.json"))
    path = write_report(cfg, run_dir, "label_report.json", {
        "command": "label", "task": task, "source": labelled.source,
        "qc": labelled.qc, "agreement": agreement, "outputs": outputs,
    })
    print(f"label: coverage={labelled.qc['coverage']:.3f} -> {path}")
    return 0


def cmd_route(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    run_dir = cfg["output_dir"]
    os.makedirs(run_dir, exist_ok=True)
    tokenizer, model = _load_trained(cfg, args.model_dir or run_dir)
    split = load_task_data(cfg)
    tc = _train_config(cfg)
    task = cfg["task"]
    eval_pool = split.test
    subset_n = cfg["router"].get("subset_n")
    if subset_n and task != "cti":
        eval_pool = balanced_sample(eval_pool, int(subset_n),
                                    substream(cfg["seed"], "route-subset")).examples
    elif subset_n:
        eval_pool = eval_pool[: int(subset_n)]
    test_data = encode_dataset(task, eval_pool, tokenizer, tc.max_seq_len)
    rcfg = RouterConfig(threshold=float(cfg["router"].get("threshold", 0.75)), task=task,
                        measure=cfg["router"].get("measure", "max_prob"))
    preds = predictions_from_model(model, test_data, measure=rcfg.measure)
    endpoint = _endpoint(cfg, args.mock)
    template = _default_template(cfg)
    transport = make_mock_transport(args.mock, cfg, split) if args.mock else None
    result = route_and_merge(
        preds, rcfg, endpoint, template,
        allowed_labels=None if task == "cti" else TASK_LABELS[task],
        tag_vocab=TAG_VOCAB if task == "cti" else None,
        entity_catalog=_entity_catalog() if task == "cti" else None,
        transport=transport,
        replay_log=_replay_logger(cfg),
    )
    write_routing_transcript(result.records, os.path.join(run_dir, "routing.jsonl"))
    path = write_report(cfg, run_dir, "route_report.json", {
        "command": "route", "task": task, "threshold": rcfg.threshold,
        **result.report(),
    })
    before = f"{result.f1_before:.4f}" if result.f1_before is not None else "n/a"
    after = f"{result.f1_after:.4f}" if result.f1_after is not None else "n/a"
    print(f"route: before={before} after={after} routed={result.routed_count} -> {path}")
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    run_dir = cfg["output_dir"]
    os.makedirs(run_dir, exist_ok=True)
    b = cfg["bench"]
    samples = int(b.get("samples", 300))
    batches = int(b.get("batches", 100))
    batch_size = int(b.get("batch_size", 32))
    warmup = int(b.get("warmup", 10))
    strategies = b.get("strategies", [cfg["strategy"]])
    split = load_task_data(cfg)
    tokenizer = build_tokenizer(cfg["task"], split.train)
    tc = _train_config(cfg)
    data = encode_dataset(cfg["task"], split.test, tokenizer, tc.max_seq_len)
    rows = []
    for strategy in strategies:
        run_cfg = dict(cfg)
        run_cfg["strategy"] = strategy
        model = build_model(run_cfg, tokenizer)
        model.eval()
        lat = measure_latency(model_latency_step(model, data.ids, data.mask),
                              samples=samples, warmup=warmup, name=strategy)
        thr = measure_throughput(model_batch_step(model, data.ids, data.mask, batch_size),
                                 batches=batches, batch_size=batch_size, warmup=warmup,
                                 name=strategy)
        write_timing_log(lat.durations_s, os.path.join(run_dir, f"latency_{strategy}.log"))
        write_timing_log(thr.durations_s, os.path.join(run_dir, f"throughput_{strategy}.log"))
        rows.append({"strategy": strategy, "latency": lat.to_dict(), "throughput": thr.to_dict()})
        print(f"bench {strategy}: IT={lat.mean_ms:.2f}ms TP={thr.mean_samples_per_s:.1f}/s")
    import platform

    host = {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "cpu_count": os.cpu_count(),
    }
    path = write_report(cfg, run_dir, "bench_report.json",
                        {"command": "bench", "host": host, "rows": rows})
    print(f"bench -> {path}")
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.reports:
        with open(path, encoding="utf-8") as fh:
            rep = json.load(fh)
        metrics = rep.get("metrics", {})
        embedded = rep.get("config", {})
        row = {
            "path": path,
            "command": rep.get("command"),
            "task": rep.get("task") or embedded.get("task"),
            "strategy": rep.get("strategy") or embedded.get("strategy"),
            "f1": metrics.get("f1"),
            "trainable_fraction": metrics.get("trainable_fraction"),
            "wall_time_seconds": metrics.get("wall_time_seconds"),
            "relative_time_vs_full": None,
        }
        if rep.get("command") == "route":
            row["f1_before_llm"] = rep.get("f1_before_llm")
            row["f1_after_llm"] = rep.get("f1_after_llm")
            row["f1"] = rep.get("f1_after_llm")
        elif rep.get("command") == "label":
            qc = rep.get("qc", {})
            row["coverage"] = qc.get("coverage")
            agreement = rep.get("agreement") or {}
            row["agreement"] = agreement.get("overall")
        rows.append(row)
    # signed relative time against a full fine-tune baseline, when one is present
    full_times = [r["wall_time_seconds"] for r in rows
                  if r["strategy"] == "full_finetune" and r["wall_time_seconds"]]
    if full_times:
        baseline = sorted(full_times)[len(full_times) // 2]
        for r in rows:
            if r["wall_time_seconds"] and r["strategy"] != "full_finetune":
                r["relative_time_vs_full"] = (r["wall_time_seconds"] - baseline) / baseline
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "comparison.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"rows": rows}, fh, indent=2)
    header = f"{'task':<6} {'strategy':<14} {'f1':>8} {'trainable%':>11} {'wall_s':>8} {'vs_full':>8}"
    print(header)
    print("-" * len(header))
    for r in rows:
        frac = f"{100 * r['trainable_fraction']:.4f}" if r["trainable_fraction"] else "-"
        wall = f"{r['wall_time_seconds']:.2f}" if r["wall_time_seconds"] else "-"
        f1 = f"{r['f1']:.4f}" if r["f1"] is not None else "-"
        rel = f"{100 * r['relative_time_vs_full']:+.1f}%" if r["relative_time_vs_full"] is not None else "-"
        print(f"{r['task'] or '-':<6} {r['strategy'] or '-':<14} {f1:>8} {frac:>11} {wall:>8} {rel:>8}")
    print(f"report -> {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compfreeze",
                                     description="Adapter fine-tuning and LLM pipelines")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, needs_config: bool = True) -> None:
        if needs_config:
            p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--mock", default=None,
                       help="LLM mock: scripted | oracle | adversarial | noisy:p")

    p_train = sub.add_parser("train", help="fine-tune with a placement strategy")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a saved run")
    common(p_eval)
    p_eval.add_argument("--model-dir", default=None, help="run dir holding base/ and delta/")
    p_eval.set_defaults(func=cmd_eval)

    p_label = sub.add_parser("label", help="LLM-label the training inputs")
    common(p_label)
    p_label.set_defaults(func=cmd_label)

    p_route = sub.add_parser("route", help="confidence-route test inputs to the LLM")
    common(p_route)
    p_route.add_argument("--model-dir", default=None)
    p_route.set_defaults(func=cmd_route)

    p_bench = sub.add_parser("bench", help="latency/throughput protocol")
    common(p_bench)
    p_bench.set_defaults(func=cmd_bench)

    p_report = sub.add_parser("report", help="merge run reports into a comparison")
    p_report.add_argument("reports", nargs="+")
    p_report.add_argument("--out", default=None)
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.manual_seed(0)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
