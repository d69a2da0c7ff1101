# global imports
import json

# local imports
from sdmcalibrate.classes.errors import DatasetError, SdmError

ACCURACY_DIGITS = 3
FRACTION_DIGITS = 2
NOT_AVAILABLE = "N/A"


class StratumResult:
    """Admitted accuracy of one stratum
    :param admitted: admitted count in the stratum
    :param correct: correct predictions among them
    :param total: size of the evaluated set (denominator of the fraction)
    """

    def __init__(self, admitted, correct, total):
        self.admitted = admitted
        self.correct = correct
        self.total = total

    @property
    def accuracy(self):
        if self.admitted == 0:
            return None
        return self.correct / self.admitted

    @property
    def fraction(self):
        if self.total == 0:
            return 0.0
        return self.admitted / self.total

    def as_dict(self):
        accuracy = self.accuracy
        return {
            "accuracy": NOT_AVAILABLE if accuracy is None else round(accuracy, ACCURACY_DIGITS),
            "fraction": round(self.fraction, FRACTION_DIGITS),
            "n": self.admitted,
        }


class CalibrationReport:
    """Admitted-set accuracies stratified by true and predicted label"""

    def __init__(self, name, alpha, by_label, by_prediction, marginal, identifiers=None):
        self.name = name
        self.alpha = alpha
        self.by_label = by_label
        self.by_prediction = by_prediction
        self.marginal = marginal
        self.identifiers = dict(identifiers or {})

    @property
    def failing_strata(self):
        """(stratification, class) pairs whose admitted accuracy is below alpha'"""
        failing = []
        for kind, strata in (("label", self.by_label), ("prediction", self.by_prediction)):
            for c, stratum in enumerate(strata):
                if stratum.accuracy is not None and stratum.accuracy < self.alpha:
                    failing.append((kind, c))
        return failing

    @property
    def passed(self):
        return not self.failing_strata

    def as_dict(self):
        return {
            "estimator": self.name,
            "alpha": self.alpha,
            "passed": self.passed,
            "failing": [{"by": kind, "class": c} for kind, c in self.failing_strata],
            "by_label": [s.as_dict() for s in self.by_label],
            "by_prediction": [s.as_dict() for s in self.by_prediction],
            "marginal": self.marginal.as_dict(),
            "identifiers": self.identifiers,
        }


def _labels(verdicts):
    if any(v.label is None for v in verdicts):
        raise SdmError("evaluation needs a label for every point", "missing_labels")
    return [v.label for v in verdicts]


def evaluate_estimator(verdicts, alpha_prime, C=None, name="p_lower", identifiers=None):
    """Accuracy over admitted points, stratified by y and by the prediction
    Fractions are over the whole evaluated set. A prediction outside
    [0, C) counts in the marginal row only.
    """
    labels = _labels(verdicts)
    if C is None:
        C = max(labels + [v.prediction for v in verdicts] + [-1]) + 1
    for verdict, label in zip(verdicts, labels):
        if not 0 <= label < C:
            raise DatasetError("label %s of %s outside %s classes" % (label, verdict.id, C), code="label_range")
    total = len(verdicts)
    label_counts = [[0, 0] for _ in range(C)]
    prediction_counts = [[0, 0] for _ in range(C)]
    admitted = correct = 0
    for verdict, label in zip(verdicts, labels):
        if not verdict.admitted:
            continue
        hit = int(verdict.prediction == label)
        admitted += 1
        correct += hit
        label_counts[label][0] += 1
        label_counts[label][1] += hit
        if 0 <= verdict.prediction < C:
            prediction_counts[verdict.prediction][0] += 1
            prediction_counts[verdict.prediction][1] += hit
    return CalibrationReport(
        name,
        alpha_prime,
        [StratumResult(a, c, total) for a, c in label_counts],
        [StratumResult(a, c, total) for a, c in prediction_counts],
        StratumResult(admitted, correct, total),
        identifiers,
    )


def no_rejection(verdicts):
    """Copies of the verdicts with every point admitted at its prediction"""
    out = []
    for verdict in verdicts:
        copy = type(verdict).__new__(type(verdict))
        copy.__dict__.update(verdict.__dict__)
        copy.admitted = True
        out.append(copy)
    return out


def suspect_annotation_report(verdicts):
    """Admitted points whose label disagrees with the prediction, highest p_lower first"""
    labels = _labels(verdicts)
    suspects = [v for v, y in zip(verdicts, labels) if v.admitted and v.prediction != y]
    suspects.sort(key=lambda v: -(v.p_lower or 0.0))
    return [
        {
            "id": v.id,
            "label": v.label,
            "prediction": v.prediction,
            "p_lower": v.p_lower,
            "q": v.q,
            "soft_qbin": v.softqbin,
            "hard_qbin": v.hardqbin,
            "n_hat": v.n_hat,
            "exemplar_ids": v.exemplar_ids,
        }
        for v in suspects
    ]


def render_json(reports, suspects=None):
    data = {"reports": [report.as_dict() for report in reports]}
    if suspects is not None:
        data["suspects"] = suspects
    return json.dumps(data, sort_keys=True, indent=2)


def _cell(stratum):
    accuracy = stratum.accuracy
    accuracy = NOT_AVAILABLE if accuracy is None else "%.*f" % (ACCURACY_DIGITS, accuracy)
    return "{:>7} {:>6}".format(accuracy, "%.*f" % (FRACTION_DIGITS, stratum.fraction))


def render_text(reports, suspects=None):
    """Aligned table: one row per estimator, (accuracy, n/|test|) per stratum"""
    if not reports:
        return ""
    C = len(reports[0].by_label)
    width = max([len("estimator")] + [len(r.name) for r in reports])
    header = ["{:<{}}".format("estimator", width)]
    header += ["{:>14}".format("y=%s" % c) for c in range(C)]
    header += ["{:>14}".format("yhat=%s" % c) for c in range(C)]
    header += ["{:>14}".format("marginal"), "  calibrated"]
    lines = [" ".join(header)]
    for report in reports:
        row = ["{:<{}}".format(report.name, width)]
        row += [_cell(s) for s in report.by_label]
        row += [_cell(s) for s in report.by_prediction]
        row += [_cell(report.marginal), "  %s" % ("yes" if report.passed else "no")]
        lines.append(" ".join(row))
    if suspects:
        lines.append("")
        lines.append("suspect annotations (admitted, label != prediction):")
        for s in suspects:
            lines.append(
                "  %s label=%s prediction=%s p_lower=%.3f q=%s bin=%s n_hat=%.1f exemplars=%s"
                % (
                    s["id"],
                    s["label"],
                    s["prediction"],
                    s["p_lower"] or 0.0,
                    s["q"],
                    s["hard_qbin"],
                    s["n_hat"] or 0.0,
                    ",".join(s["exemplar_ids"]),
                )
            )
    return "\n".join(lines) + "\n"
