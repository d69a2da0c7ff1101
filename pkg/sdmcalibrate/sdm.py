# coding: utf-8

# global imports
from __future__ import print_function
import argparse
import json
import os
import sys
import time

# local imports
from sdmcalibrate.classes.archive import load_archive, save_archive
from sdmcalibrate.classes.baselines import (
    BASELINE_METHODS,
    LLM_METHODS,
    ConformalConfig,
    llm_baseline_predict,
    run_baselines,
)
from sdmcalibrate.classes.calibration import RescalerConfig
from sdmcalibrate.classes.constants import DEFAULTS, ESTIMATE_VARIANTS, NET_DEFAULTS
from sdmcalibrate.classes.dataset import (
    arrays,
    build_llm_features,
    load_and_validate,
    load_instances,
    load_llm_responses,
    load_records,
    serialize_records,
)
from sdmcalibrate.classes.errors import DatasetError, SdmError
from sdmcalibrate.classes.estimator import build_estimator, predict_batch, retune
from sdmcalibrate.classes.network import (
    GenAiInstance,
    ToyLM,
    TrainingSchedule,
    build_verification,
    completion_cap,
    generate_verified,
    load_corpus,
    load_lm,
    save_lm,
    sdm_network_train,
)
from sdmcalibrate.classes.report import (
    evaluate_estimator,
    no_rejection,
    render_json,
    render_text,
    suspect_annotation_report,
)
from sdmcalibrate.classes.session import Session, Timer
from sdmcalibrate.classes.synthetic import blob_bundle, flip_labels, shifted_blobs, toy_corpus
from sdmcalibrate.classes.training import TrainingRunConfig


def add_common(parser):
    parser.add_argument(
        "-v",
        "--verbose",
        action="store_true",
        default=False,
        help="Increase output verbosity [False]",
    )
    parser.add_argument(
        "-l",
        "--logfile",
        metavar="<FILE>",
        type=argparse.FileType("w", encoding="UTF-8"),
        default=False,
        help="output log file [stderr]",
    )
    parser.add_argument(
        "--seed", metavar="<INT>", type=int, default=DEFAULTS["seed"], help="Root random seed [0]"
    )
    parser.add_argument(
        "--save-settings",
        action="store_true",
        default=False,
        help="Save settings into file [False]",
    )


def add_training(parser):
    parser.add_argument(
        "--alpha", metavar="<FLOAT>", type=float, default=DEFAULTS["alpha"], help="Target probability alpha' [0.95]"
    )
    parser.add_argument(
        "--j", metavar="<INT>", type=int, default=DEFAULTS["j"], help="Number of reshuffled training rounds [10]"
    )
    parser.add_argument(
        "--m", metavar="<INT>", type=int, default=DEFAULTS["m"], help="Number of adaptor filters [1000]"
    )
    parser.add_argument(
        "--max-epochs",
        metavar="<INT>",
        type=int,
        default=DEFAULTS["max_epochs"],
        help="Adaptor epochs per round [50]",
    )
    parser.add_argument(
        "--batch-size", metavar="<INT>", type=int, default=DEFAULTS["batch_size"], help="Adaptor mini-batch size [50]"
    )
    parser.add_argument(
        "--lr", metavar="<FLOAT>", type=float, default=DEFAULTS["lr"], help="Adaptor learning rate [1e-5]"
    )
    parser.add_argument(
        "--kernel-span",
        metavar="<INT>",
        type=int,
        default=None,
        help="Filter width, full width when omitted [None]",
    )
    parser.add_argument(
        "--nonlinearity",
        action="store_true",
        default=False,
        help="Apply tanh to the filter outputs [False]",
    )
    parser.add_argument(
        "--ce-only",
        action="store_true",
        default=False,
        help="Train with q = e - 2 and d = 1 in every epoch [False]",
    )
    parser.add_argument(
        "--rescaler-lr",
        metavar="<FLOAT>",
        type=float,
        default=DEFAULTS["rescaler_lr"],
        help="Rescaler learning rate [1e-4]",
    )
    parser.add_argument(
        "--rescaler-max-epochs",
        metavar="<INT>",
        type=int,
        default=DEFAULTS["rescaler_max_epochs"],
        help="Rescaler epoch cap [1000]",
    )
    parser.add_argument(
        "--rescaler-patience",
        metavar="<INT>",
        type=int,
        default=DEFAULTS["rescaler_patience"],
        help="Rescaler early stopping patience [10]",
    )
    parser.add_argument(
        "--top-k", metavar="<INT>", type=int, default=DEFAULTS["top_k"], help="Exemplar ids per verdict [3]"
    )


def add_report(parser):
    parser.add_argument(
        "--format",
        choices=("json", "text"),
        default="json",
        help="Report format [json]",
    )
    parser.add_argument(
        "-o",
        "--out",
        metavar="<FILE>",
        type=argparse.FileType("w", encoding="UTF-8"),
        default=sys.stdout,
        help="output report file [stdout]",
    )


def build_parser():
    parser = argparse.ArgumentParser(
        description="Similarity-distance-magnitude calibration of classifiers over frozen embeddings",
        add_help=False,
        usage="sdm <command> [options]",
    )
    commands = parser.add_subparsers(dest="command", metavar="<command>")

    train = commands.add_parser("train", add_help=False, help="Train an estimator archive")
    train.add_argument("--data", metavar="<FILE>", type=str, required=True, help="JSON-lines dataset")
    train.add_argument("--classes", metavar="<INT>", type=int, required=True, help="Number of classes")
    train.add_argument("--out", metavar="<DIR>", type=str, required=True, help="Archive directory")
    train.add_argument(
        "--balance-tolerance",
        metavar="<INT>",
        type=int,
        default=DEFAULTS["balance_tolerance"],
        help="Allowed class count difference per split [0]",
    )
    add_training(train)
    add_common(train)

    predict = commands.add_parser("predict", add_help=False, help="Write verdicts as JSON lines")
    predict.add_argument("--archive", metavar="<DIR>", type=str, required=True, help="Archive directory")
    predict.add_argument("--data", metavar="<FILE>", type=str, required=True, help="JSON-lines dataset")
    predict.add_argument(
        "--variant", choices=ESTIMATE_VARIANTS, default="lower", help="Estimate variant [lower]"
    )
    predict.add_argument(
        "-o",
        "--out",
        metavar="<FILE>",
        type=argparse.FileType("w", encoding="UTF-8"),
        default=sys.stdout,
        help="output verdicts file [stdout]",
    )
    add_common(predict)

    evaluate = commands.add_parser("eval", add_help=False, help="Evaluate an archive on labelled data")
    evaluate.add_argument("--archive", metavar="<DIR>", type=str, required=True, help="Archive directory")
    evaluate.add_argument("--data", metavar="<FILE>", type=str, required=True, help="JSON-lines dataset")
    evaluate.add_argument(
        "--variant", choices=ESTIMATE_VARIANTS, default="lower", help="Estimate variant [lower]"
    )
    evaluate.add_argument(
        "--suspects",
        action="store_true",
        default=False,
        help="Add the admitted points whose label disagrees with the prediction [False]",
    )
    add_report(evaluate)
    add_common(evaluate)

    baselines = commands.add_parser("baselines", add_help=False, help="Compare against baseline estimators")
    baselines.add_argument("--archive", metavar="<DIR>", type=str, help="Archive directory")
    baselines.add_argument("--data", metavar="<FILE>", type=str, help="JSON-lines dataset")
    baselines.add_argument(
        "--responses", metavar="<FILE>", type=str, help="LLM response file for the letter/verbal baselines"
    )
    baselines.add_argument(
        "--methods",
        metavar="<STR>",
        type=str,
        default=",".join(BASELINE_METHODS),
        help="Comma separated methods among %s [%s]"
        % (", ".join(BASELINE_METHODS + LLM_METHODS), ",".join(BASELINE_METHODS)),
    )
    baselines.add_argument(
        "--alpha", metavar="<FLOAT>", type=float, default=None, help="Threshold alpha' [archive alpha']"
    )
    baselines.add_argument(
        "--conformal-alpha", metavar="<FLOAT>", type=float, default=0.05, help="Conformal miscoverage [0.05]"
    )
    baselines.add_argument("--lam", metavar="<FLOAT>", type=float, default=0.01, help="RAPS penalty [0.01]")
    baselines.add_argument("--k-reg", metavar="<INT>", type=int, default=1, help="RAPS free ranks [1]")
    add_report(baselines)
    add_common(baselines)

    re_tune = commands.add_parser("retune", add_help=False, help="Re-derive thresholds for a new alpha'")
    re_tune.add_argument("--archive", metavar="<DIR>", type=str, required=True, help="Archive directory")
    re_tune.add_argument("--alpha", metavar="<FLOAT>", type=float, required=True, help="New alpha'")
    re_tune.add_argument(
        "--out", metavar="<DIR>", type=str, default=None, help="Output archive directory [in place]"
    )
    add_common(re_tune)

    llm = commands.add_parser("llm-features", add_help=False, help="Convert LLM responses into a dataset")
    llm.add_argument("--responses", metavar="<FILE>", type=str, required=True, help="LLM response file")
    llm.add_argument(
        "--labels", metavar="<FILE>", type=str, default=None, help="JSON lines of {id, label} [labels in responses]"
    )
    llm.add_argument(
        "-o",
        "--out",
        metavar="<FILE>",
        type=argparse.FileType("w", encoding="UTF-8"),
        default=sys.stdout,
        help="output dataset file [stdout]",
    )
    add_common(llm)

    net_train = commands.add_parser("net-train", add_help=False, help="Fine-tune the toy SDM network")
    net_train.add_argument("--corpus", metavar="<FILE>", type=str, required=True, help="JSON-lines token corpus")
    net_train.add_argument("--out", metavar="<DIR>", type=str, required=True, help="Output directory")
    net_train.add_argument(
        "--epochs", metavar="<INT>", type=int, default=NET_DEFAULTS["epochs"], help="Fine-tuning epochs [5]"
    )
    net_train.add_argument(
        "--beta-min", metavar="<FLOAT>", type=float, default=NET_DEFAULTS["beta_min"], help="Initial beta [0]"
    )
    net_train.add_argument(
        "--beta-max", metavar="<FLOAT>", type=float, default=NET_DEFAULTS["beta_max"], help="Final beta [0.1]"
    )
    net_train.add_argument(
        "--net-batch-size",
        metavar="<INT>",
        type=int,
        default=NET_DEFAULTS["batch_size"],
        help="Sequences per fine-tuning batch [50]",
    )
    net_train.add_argument(
        "--net-lr", metavar="<FLOAT>", type=float, default=NET_DEFAULTS["lr"], help="Fine-tuning learning rate [1e-3]"
    )
    net_train.add_argument("--hidden", metavar="<INT>", type=int, default=48, help="Toy model hidden size [48]")
    net_train.add_argument(
        "--vocab", metavar="<INT>", type=int, default=None, help="Vocabulary size [largest token id in the corpus + 1]"
    )
    net_train.add_argument(
        "--no-keep-reference",
        action="store_true",
        default=False,
        help="Always select a fine-tuned epoch [False]",
    )
    add_training(net_train)
    add_common(net_train)

    net_generate = commands.add_parser("net-generate", add_help=False, help="Generate and verify completions")
    net_generate.add_argument("--lm", metavar="<DIR>", type=str, required=True, help="net-train output directory")
    net_generate.add_argument(
        "--prompt-file", metavar="<FILE>", type=str, required=True, help="JSON lines with a tokens list"
    )
    net_generate.add_argument(
        "-o",
        "--out",
        metavar="<FILE>",
        type=argparse.FileType("w", encoding="UTF-8"),
        default=sys.stdout,
        help="output file [stdout]",
    )
    add_common(net_generate)

    synth = commands.add_parser("synth", add_help=False, help="Write a synthetic dataset")
    synth.add_argument("--kind", choices=("blobs", "ood", "corpus"), default="blobs", help="Dataset kind [blobs]")
    synth.add_argument("--n", metavar="<INT>", type=int, default=2000, help="Instances per split [2000]")
    synth.add_argument("--classes", metavar="<INT>", type=int, default=2, help="Number of classes [2]")
    synth.add_argument("--dim", metavar="<INT>", type=int, default=8, help="Embedding dimension [8]")
    synth.add_argument("--separation", metavar="<FLOAT>", type=float, default=3.0, help="Class separation [3.0]")
    synth.add_argument("--flip", metavar="<FLOAT>", type=float, default=0.0, help="Test label flip rate [0]")
    synth.add_argument(
        "-o",
        "--out",
        metavar="<FILE>",
        type=argparse.FileType("w", encoding="UTF-8"),
        default=sys.stdout,
        help="output file [stdout]",
    )
    add_common(synth)
    return parser


def save_settings(args):
    """settings report next to the output, as in every other run of the tool"""
    out = getattr(args, "out", None)
    name = getattr(out, "name", out)
    if not name or name == "<stdout>":
        return
    settings_name = os.path.splitext(str(name))[0] + ".settings"
    formatting = "{:74}{:\t>1}\n"
    try:
        with open(settings_name, "w") as settings_file:
            settings_file.write(formatting.format("time stamp: ", time.strftime("%X %x %Z")))
            for key, value in sorted(vars(args).items()):
                settings_file.write(formatting.format("--" + key.replace("_", "-"), str(getattr(value, "name", value))))
    except OSError as exc:
        print("Unable to write %s: %s" % (settings_name, repr(exc)), file=sys.stderr)


def echo_config(args):
    resolved = {key: getattr(value, "name", value) for key, value in vars(args).items()}
    print("config: %s" % json.dumps(resolved, sort_keys=True, default=str), file=sys.stderr)


def training_config(args):
    return TrainingRunConfig(
        j=args.j,
        max_epochs=args.max_epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        alpha=args.alpha,
        m=args.m,
        seed=args.seed,
        kernel_span=args.kernel_span,
        nonlinearity=args.nonlinearity,
        ce_only=args.ce_only,
        top_k=args.top_k,
        rescaler=RescalerConfig(args.rescaler_lr, args.rescaler_max_epochs, args.rescaler_patience),
    )


def load_test_split(archive, path):
    instances = load_instances(path, archive.C, archive.D)
    tests = [inst for inst in instances if inst.split in (None, "test")]
    return tests or instances


def run_train(args, session):
    config = training_config(args)
    bundle = load_and_validate(args.data, args.classes, args.balance_tolerance, args.seed)
    print("Training %s rounds..." % config.j, file=sys.stderr)
    archive = build_estimator(bundle, config, session)
    save_archive(archive, args.out)
    thresholds = archive.thresholds
    if not thresholds.admitting:
        print("No high-probability region found: every point will be rejected.", file=sys.stderr)
    return "Trained %s rounds" % config.j


def run_predict(args, session):
    archive = load_archive(args.archive)
    instances = load_test_split(archive, args.data)
    X, y, ids = arrays(instances, archive.D)
    verdicts = predict_batch(archive, X, ids, y, args.variant, session)
    serialize_records([v.to_json() for v in verdicts], args.out)
    return "Predicted %s points, %s admitted" % (len(verdicts), sum(v.admitted for v in verdicts))


def run_eval(args, session):
    archive = load_archive(args.archive)
    instances = load_test_split(archive, args.data)
    X, y, ids = arrays(instances, archive.D)
    verdicts = predict_batch(archive, X, ids, y, args.variant, session)
    identifiers = {"archive": os.path.abspath(args.archive), "variant": args.variant}
    reports = [
        evaluate_estimator(no_rejection(verdicts), archive.alpha, archive.C, "no_rejection", identifiers),
        evaluate_estimator(verdicts, archive.alpha, archive.C, "p_" + args.variant, identifiers),
    ]
    suspects = suspect_annotation_report(verdicts) if args.suspects else None
    render = render_json if args.format == "json" else render_text
    args.out.write(render(reports, suspects))
    return "Evaluated %s points" % len(verdicts)


def run_baselines_command(args, session):
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    llm_methods = [m for m in methods if m in LLM_METHODS]
    logit_methods = [m for m in methods if m not in LLM_METHODS]
    reports = []
    alpha = args.alpha
    if logit_methods:
        if not args.archive or not args.data:
            raise SdmError("--archive and --data are required for %s" % ",".join(logit_methods), "missing_argument")
        archive = load_archive(args.archive)
        alpha = alpha or archive.alpha
        if archive.calibration_logits is None:
            raise SdmError("archive has no cached calibration logits", "missing_logits")
        instances = load_test_split(archive, args.data)
        X, y, ids = arrays(instances, archive.D)
        _, logits = archive.model.forward(X)
        config = ConformalConfig(args.conformal_alpha, args.lam, args.k_reg)
        results = run_baselines(
            logit_methods, archive.calibration_logits, archive.calibration_labels, logits, alpha, ids, y, config
        )
        reports.append(evaluate_estimator(no_rejection(results[logit_methods[0]]), alpha, archive.C, "no_rejection"))
        for method in logit_methods:
            reports.append(evaluate_estimator(results[method], alpha, archive.C, method))
    if llm_methods:
        if not args.responses:
            raise SdmError("--responses is required for %s" % ",".join(llm_methods), "missing_argument")
        alpha = alpha or DEFAULTS["alpha"]
        records = load_llm_responses(args.responses)
        for method in llm_methods:
            verdicts = []
            for record in records:
                features, refused = build_llm_features(record)
                verdicts.append(llm_baseline_predict(features, refused, method, alpha, record.id, record.label))
            reports.append(evaluate_estimator(verdicts, alpha, None, method))
    render = render_json if args.format == "json" else render_text
    args.out.write(render(reports))
    return "Compared %s methods" % len(methods)


def run_retune(args, session):
    archive = retune(load_archive(args.archive), args.alpha)
    save_archive(archive, args.out or args.archive)
    return "Retuned to alpha' %s" % args.alpha


def run_llm_features(args, session):
    records = load_llm_responses(args.responses)
    labels = {}
    if args.labels:
        labels = {str(r["id"]): int(r["label"]) for r in load_records(args.labels)}
    out = []
    for i, record in enumerate(records):
        features, refused = build_llm_features(record)
        id = str(record.id if record.id is not None else i)
        label = labels.get(id, record.label)
        if label is None:
            raise SdmError("no label for response %s" % id, "missing_labels")
        entry = {"id": id, "label": int(label), "embedding": features.tolist()}
        if refused:
            entry["text"] = "refused"
        out.append(entry)
    serialize_records(out, args.out)
    return "Converted %s responses" % len(out)


def run_net_train(args, session):
    train, calibration, test = load_corpus(args.corpus, args.seed)
    V = 1 + max(max(inst.tokens) for inst in train + calibration + test)
    if args.vocab is not None:
        if args.vocab < V:
            raise DatasetError("--vocab %s is below the %s tokens of the corpus" % (args.vocab, V), code="vocab_size")
        V = args.vocab
    lm = ToyLM.initialize(V, args.hidden, session.rng(2))
    print("Training the verification layer...", file=sys.stderr)
    archive = build_verification(lm, train, calibration, training_config(args), session)
    pool = {inst.id: inst for inst in train + calibration}
    train = [pool[i] for i in archive.model.train_ids]
    calibration = [pool[i] for i in archive.model.calibration_ids]
    schedule = TrainingSchedule(
        args.beta_min, args.beta_max, args.epochs, args.net_batch_size, args.net_lr
    )
    print("Fine-tuning for %s epochs..." % args.epochs, file=sys.stderr)
    result = sdm_network_train(train, calibration, archive, lm, schedule, session, not args.no_keep_reference)
    cap = completion_cap(train + calibration, schedule.cap_factor)
    save_lm(result.lm, os.path.join(args.out, "lm"), schedule, {"cap": cap, "epoch": result.epoch})
    save_archive(archive, os.path.join(args.out, "verification"))
    return "Selected epoch %s (%s admitted, %s before fine-tuning)" % (
        result.epoch,
        result.metric,
        result.reference_metric,
    )


def run_net_generate(args, session):
    lm, config = load_lm(os.path.join(args.lm, "lm"))
    archive = load_archive(os.path.join(args.lm, "verification"))
    out = []
    for i, record in enumerate(load_records(args.prompt_file), 1):
        if "marker" in record:
            prompt = GenAiInstance(record["tokens"], record["marker"], record.get("y", 1)).prompt
        else:
            prompt = record["tokens"]
        id = str(record.get("id", i))
        completion, truncated, verdict = generate_verified(lm, archive, prompt, config.get("cap"), id, session)
        entry = verdict.to_json()
        entry["completion"] = completion
        entry["truncated"] = truncated
        out.append(entry)
    serialize_records(out, args.out)
    return "Generated %s completions" % len(out)


def run_synth(args, session):
    rng = session.rng(3)
    if args.kind == "corpus":
        instances, _ = toy_corpus(args.n, seed=args.seed)
        records = [inst.to_record() for inst in instances]
    elif args.kind == "ood":
        records = [inst.to_record() for inst in shifted_blobs(args.n, args.classes, args.dim, args.separation, seed=args.seed)]
    else:
        bundle = blob_bundle(args.n, args.n, args.n, args.classes, args.dim, args.separation, args.seed)
        test = bundle.test
        if args.flip:
            test, flipped = flip_labels(test, args.flip, rng, args.classes)
            session.write_log("flipped %s test labels" % len(flipped))
        records = [inst.to_record() for inst in bundle.train + bundle.calibration + test]
    serialize_records(records, args.out)
    return "Wrote %s records" % len(records)


HANDLERS = {
    "train": run_train,
    "predict": run_predict,
    "eval": run_eval,
    "baselines": run_baselines_command,
    "retune": run_retune,
    "llm-features": run_llm_features,
    "net-train": run_net_train,
    "net-generate": run_net_generate,
    "synth": run_synth,
}


def main(argv=None):
    parser = build_parser()

    # extract arguments from the command line
    try:
        parser.error = parser.exit
        for action in parser._actions:
            if isinstance(action, argparse._SubParsersAction):
                for subparser in action.choices.values():
                    subparser.error = subparser.exit
        args = parser.parse_args(argv)
    except SystemExit:
        parser.print_help(file=sys.stderr)
        sys.exit(2)
    if args.command not in HANDLERS:
        parser.print_help(file=sys.stderr)
        sys.exit(2)

    timer = Timer()
    echo_config(args)
    if args.save_settings:
        save_settings(args)
    session = Session(args.seed, args.verbose, args.logfile)
    try:
        summary = HANDLERS[args.command](args, session)
    except SdmError as e:
        print(json.dumps(e.as_dict(), sort_keys=True), file=sys.stderr)
        sys.exit(2)
    finally:
        out = getattr(args, "out", None)
        if hasattr(out, "flush"):
            out.flush()
        session.close()
    print(
        "%s in %s seconds with %s similarity queries." % (summary, timer.elapsed, session.counter),
        file=sys.stderr,
    )
    return 0


if __name__ == "__main__":
    main()
