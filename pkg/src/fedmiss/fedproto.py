"""Round-based coordinator/site protocol with a replayable transcript.

Sites are isolated actors: each :class:`SiteNode` holds only its own
dataset and answers serialized broadcasts with serialized replies. The
:class:`Coordinator` never sees a row of data; everything it computes is a
function of the reply payloads, which is what makes :func:`replay` exact.

Round plans (broadcast kind, reply kind) per estimator and transport:

===================  =====================================================
CC / sufficient      suff_stats; theta → rss_report; theta → variance_blocks
IPW site / suff.     same as CC, weighted
IPW calib. / suff.   candidate_models; candidates → suff_stats; rss; variance
CC / counts          count_rows (variance computed from the counts)
IPW site / counts    count_rows; theta → variance_blocks
IPW calib. / counts  candidate_models; candidates → count_rows; variance
===================  =====================================================
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .datamodel import EstimatorChoice, ModelSpec, SiteDataset, WeightingFormula
from .estimators import (
    CountRow, CountTable, FitResult, RSSReport, SuffStats, combine_glm, combine_linear, combine_sigma,
    site_counts, site_rss, site_suffstats, suppressed_mask,
)
from .exceptions import (
    AllCompleteOrAllMissing, CorruptTranscript, FedMissError, NotConverged, ProtocolViolation, Separation,
)
from .variance import (
    StackedVariance, VarianceBlocks, assemble_stacked, count_variance_blocks, naive_variance,
    site_variance_blocks,
)
from .weights import CandidateModel, CandidateSet, SiteWeighting, fit_nuisance

PROTOCOL_VERSION = 1
COORD = "coordinator"
ALL_SITES = "*"
TO_COORD = "site->coord"
TO_SITES = "coord->site"

PAYLOAD_FIELDS = {
    "suff_stats": {"site", "xtwx", "xtwy"},
    "rss_report": {"site", "rss", "n_complete"},
    "count_rows": {"site", "fields", "rows", "suppressed"},
    "candidate_models": {"site", "n_rows", "group", "candidates"},
    "candidate_broadcast": {"candidates"},
    "theta_broadcast": {"theta"},
    "variance_blocks": {"site", "regime", "dims", "n", "blocks"},
}

_SI_TAIL = [("theta_broadcast", "rss_report"), ("theta_broadcast", "variance_blocks")]
PLANS = {
    ("CC", "sufficient_info"): [(None, "suff_stats")] + _SI_TAIL,
    ("IPW_site", "sufficient_info"): [(None, "suff_stats")] + _SI_TAIL,
    ("IPW_calibrated", "sufficient_info"):
        [(None, "candidate_models"), ("candidate_broadcast", "suff_stats")] + _SI_TAIL,
    ("CC", "count_aggregation"): [(None, "count_rows")],
    ("IPW_site", "count_aggregation"): [(None, "count_rows"), ("theta_broadcast", "variance_blocks")],
    ("IPW_calibrated", "count_aggregation"):
        [(None, "candidate_models"), ("candidate_broadcast", "count_rows"),
         ("theta_broadcast", "variance_blocks")],
}
SELECTION_RULES = ("largest_site", "two_largest_one_per_mechanism")


def round_plan(estimator: EstimatorChoice) -> list[tuple[str | None, str]]:
    return PLANS[(estimator.estimator, estimator.transport)]


@dataclass(frozen=True)
class SuppressionPolicy:
    T: int = 11
    action: str = "drop"

    def __post_init__(self):
        if int(self.T) < 1:
            raise ValueError("T must be at least 1")
        if self.action not in ("drop", "refuse"):
            raise ValueError("action must be 'drop' or 'refuse'")

    def to_dict(self) -> dict:
        return {"T": int(self.T), "action": self.action}


@dataclass(frozen=True)
class KnownWeights:
    """Fixed completeness probabilities per site (oracle or random draws).

    No completeness model is estimated, so the variance has no α blocks.
    """

    pi: Mapping[str, np.ndarray]
    source: str = "oracle"


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


@dataclass(frozen=True)
class RoundMessage:
    round_index: int
    direction: str
    sender: str
    receiver: str
    kind: str
    payload: dict
    raw: bytes = field(repr=False, default=b"")

    @classmethod
    def build(cls, round_index, direction, sender, receiver, kind, payload) -> "RoundMessage":
        body = {"round": int(round_index), "direction": direction, "sender": sender,
                "receiver": receiver, "kind": kind, "payload": payload}
        return cls.parse(_dumps(body))

    @classmethod
    def parse(cls, raw: bytes) -> "RoundMessage":
        try:
            body = json.loads(raw)
        except (ValueError, UnicodeDecodeError) as exc:
            raise ProtocolViolation(f"undecodable message: {exc}") from None
        if not isinstance(body, dict) or set(body) != {"round", "direction", "sender", "receiver", "kind", "payload"}:
            raise ProtocolViolation("message envelope has unexpected fields")
        kind = body["kind"]
        if kind not in PAYLOAD_FIELDS:
            raise ProtocolViolation(f"unknown payload kind {kind!r}")
        if not isinstance(body["payload"], dict) or set(body["payload"]) != PAYLOAD_FIELDS[kind]:
            raise ProtocolViolation(f"{kind} payload fields {sorted(body['payload'])} are not the schema")
        if body["direction"] not in (TO_COORD, TO_SITES):
            raise ProtocolViolation(f"bad direction {body['direction']!r}")
        return cls(int(body["round"]), body["direction"], body["sender"], body["receiver"], kind,
                   body["payload"], bytes(raw))


@dataclass
class Transcript:
    header: dict
    messages: list[RoundMessage] = field(default_factory=list)

    @property
    def total_rounds(self) -> int:
        return max((m.round_index for m in self.messages), default=0)

    @property
    def byte_sizes(self) -> list[int]:
        return [len(m.raw) for m in self.messages]

    def round(self, index: int) -> list[RoundMessage]:
        return [m for m in self.messages if m.round_index == index]

    @property
    def suppression_report(self) -> dict:
        sites = []
        for m in self.messages:
            if m.kind == "count_rows":
                sites.append({"site": m.payload["site"], **m.payload["suppressed"]})
        dropped = sum(s["n_raw_dropped"] for s in sites)
        return {"T": self.header.get("policy", {}).get("T"), "sites": sites,
                "n_raw_dropped": dropped, "lossless": dropped == 0}

    def dumps(self) -> bytes:
        lines = [_dumps(self.header)] + [m.raw for m in self.messages]
        return b"\n".join(lines) + b"\n"

    def write(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, data: bytes) -> "Transcript":
        lines = [ln for ln in data.split(b"\n") if ln.strip()]
        if not lines:
            raise CorruptTranscript("empty transcript")
        try:
            header = json.loads(lines[0])
        except ValueError:
            raise CorruptTranscript("header is not JSON") from None
        if not isinstance(header, dict) or header.get("protocol_version") != PROTOCOL_VERSION:
            raise CorruptTranscript("missing or unsupported protocol header")
        messages = []
        for i, ln in enumerate(lines[1:], start=2):
            try:
                messages.append(RoundMessage.parse(ln))
            except ProtocolViolation as exc:
                raise CorruptTranscript(f"line {i}: {exc}") from None
        return cls(header, messages)

    @classmethod
    def read(cls, path) -> "Transcript":
        with open(path, "rb") as fh:
            return cls.loads(fh.read())


# ------------------------------------------------------------------ site side


class SiteNode:
    """One site. Holds its own data and answers serialized broadcasts."""

    def __init__(self, data: SiteDataset, model: ModelSpec, estimator: EstimatorChoice,
                 formula: WeightingFormula | None = None, known_pi=None,
                 policy: SuppressionPolicy | None = None, calibration: str = "projection"):
        self._data = data
        self._model = model
        self._estimator = estimator
        self._formula = formula
        self._known_pi = known_pi
        self._policy = policy or SuppressionPolicy()
        self._calibration = calibration
        self._plan = round_plan(estimator)
        self._weighting: SiteWeighting | None = None
        self._counts: CountTable | None = None
        self.site_id = data.site_id

    def _local_weighting(self) -> SiteWeighting:
        if self._weighting is None:
            if self._estimator.estimator == "CC":
                self._weighting = SiteWeighting.unit()
            elif self._known_pi is not None:
                self._weighting = SiteWeighting.known(self._known_pi)
            elif self._estimator.estimator == "IPW_site":
                self._weighting = SiteWeighting.site_specific(self._data, self._formula)
            else:
                raise ProtocolViolation("calibrated weights requested before candidates arrived")
        return self._weighting

    def handle(self, round_index: int, broadcast: bytes | None) -> bytes:
        if not 1 <= round_index <= len(self._plan):
            raise ProtocolViolation(f"site {self.site_id}: no round {round_index} in this protocol")
        want_in, reply = self._plan[round_index - 1]
        msg = None if broadcast is None else RoundMessage.parse(broadcast)
        if (msg.kind if msg else None) != want_in:
            raise ProtocolViolation(f"site {self.site_id}: round {round_index} expected {want_in}")
        payload = getattr(self, "_" + reply)(msg)
        return RoundMessage.build(round_index, TO_COORD, self.site_id, COORD, reply, payload).raw

    def _candidate_models(self, msg) -> dict:
        cands = []
        try:
            cands = [fit_nuisance(self._data, self._formula).to_dict()]
        except (AllCompleteOrAllMissing, Separation, NotConverged):
            pass  # nothing to share; the site can still use shared candidates
        return {"site": self.site_id, "n_rows": self._data.n, "group": self._data.group, "candidates": cands}

    def _weights_for(self, msg) -> SiteWeighting:
        if msg is not None and msg.kind == "candidate_broadcast":
            cands = CandidateSet(CandidateModel.from_dict(c) for c in msg.payload["candidates"])
            self._weighting = SiteWeighting.calibrated(self._data, cands, self._calibration)
        return self._local_weighting()

    def _suff_stats(self, msg) -> dict:
        return site_suffstats(self._data, self._model, self._weights_for(msg)).to_dict()

    def _count_rows(self, msg) -> dict:
        weighting = self._weights_for(msg)
        table = site_counts(self._data, self._model, weighting, self._policy.T)
        if table.suppressed_keys and self._policy.action == "refuse":
            raise ProtocolViolation(f"site {self.site_id}: {table.n_cells_dropped} cells below T={self._policy.T}")
        self._counts = table
        return {"site": self.site_id, "fields": list(table.fields), "rows": [r.to_dict() for r in table.rows],
                "suppressed": {"cells_dropped": table.n_cells_dropped, "n_raw_dropped": table.n_raw_dropped}}

    def _theta(self, msg) -> np.ndarray:
        return np.asarray(msg.payload["theta"], dtype=float)

    def _rss_report(self, msg) -> dict:
        return site_rss(self._data, self._model, self._local_weighting(), self._theta(msg)).to_dict()

    def _variance_blocks(self, msg) -> dict:
        mask = None
        if self._counts is not None and self._counts.suppressed_keys:
            mask = suppressed_mask(self._data, self._model, self._counts.suppressed_keys)
        w = self._local_weighting()
        return site_variance_blocks(self._data, self._model, self._theta(msg), w, w.regime, mask).to_dict()


# ----------------------------------------------------------- coordinator side


def select_candidates(uploads: Sequence[dict], rule) -> CandidateSet:
    """Pick the shared candidates from round-one uploads (in site order)."""
    eligible = [u for u in uploads if u["candidates"]]
    if not eligible:
        raise ProtocolViolation("no site produced a candidate model")
    if isinstance(rule, str):
        if rule == "largest_site":
            best = max(eligible, key=lambda u: u["n_rows"])  # max keeps the first of ties
            chosen = [best["site"]]
        elif rule == "two_largest_one_per_mechanism":
            leaders: dict = {}
            for u in eligible:
                g = u["group"]
                if g not in leaders or u["n_rows"] > leaders[g]["n_rows"]:
                    leaders[g] = u
            if len(leaders) < 2:
                raise ProtocolViolation("need two mechanism groups to pick one candidate from each")
            top = sorted(leaders.values(), key=lambda u: -u["n_rows"])[:2]
            chosen = [u["site"] for u in top]
        else:
            raise ValueError(f"unknown selection rule {rule!r}; use {SELECTION_RULES} or a list of site ids")
    else:
        chosen = [str(s) for s in rule]
        missing = set(chosen) - {u["site"] for u in eligible}
        if missing:
            raise ProtocolViolation(f"requested candidate sites {sorted(missing)} have no model")
    out = []
    for u in uploads:
        if u["site"] in chosen:
            out.extend(CandidateModel.from_dict(c) for c in u["candidates"])
    return CandidateSet(out)


class Coordinator:
    """Aggregates replies round by round; a pure function of the messages."""

    def __init__(self, header: dict):
        try:
            self.model = ModelSpec.from_dict(header["model"])
            self.estimator = EstimatorChoice(header["estimator"], header["transport"])
            self.sites = list(header["sites"])
            self.regime = header["regime"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptTranscript(f"bad header: {exc}") from None
        self.header = header
        self.plan = round_plan(self.estimator)
        self.candidates: CandidateSet | None = None
        self.beta = None
        self.theta = None
        self.sigma = None
        self.blocks: list[VarianceBlocks] = []
        self.variance: StackedVariance | None = None
        self.done_rounds = 0

    def broadcast(self, round_index: int) -> dict | None:
        kind = self.plan[round_index - 1][0]
        if kind is None:
            return None
        if kind == "candidate_broadcast":
            return {"candidates": [c.to_dict() for c in self.candidates]}
        if self.plan[round_index - 1][1] == "rss_report":
            return {"theta": self.beta.tolist()}
        return {"theta": self.theta.tolist()}

    def receive(self, round_index: int, replies: Sequence[RoundMessage]) -> None:
        if round_index != self.done_rounds + 1 or round_index > len(self.plan):
            raise ProtocolViolation(f"round {round_index} out of order")
        want = self.plan[round_index - 1][1]
        senders = [m.sender for m in replies]
        if senders != self.sites:
            raise ProtocolViolation(f"round {round_index}: replies from {senders}, expected {self.sites}")
        for m in replies:
            if m.kind != want or m.direction != TO_COORD or m.round_index != round_index:
                raise ProtocolViolation(f"round {round_index}: {m.sender} sent {m.kind}, expected {want}")
        payloads = [m.payload for m in replies]
        getattr(self, "_on_" + want)(payloads)
        self.done_rounds = round_index

    def _on_candidate_models(self, payloads):
        self.candidates = select_candidates(payloads, self.header.get("candidates_from", "largest_site"))

    def _on_suff_stats(self, payloads):
        self.beta = combine_linear([SuffStats.from_dict(p) for p in payloads])

    def _on_rss_report(self, payloads):
        self.sigma = combine_sigma([RSSReport.from_dict(p) for p in payloads], self.model.design_dim)
        self.theta = np.append(self.beta, self.sigma)

    def _on_count_rows(self, payloads):
        rows = [CountRow.from_dict(r) for p in payloads for r in p["rows"]]
        self.theta = combine_glm(rows, self.model)
        if self.estimator.estimator == "CC":
            blocks = [count_variance_blocks(rows, self.model, self.theta)]
            self.blocks = blocks
            self.variance = assemble_stacked(blocks, "cc")
            self.variance.naive_cov = naive_variance(blocks)

    def _on_variance_blocks(self, payloads):
        self.blocks = [VarianceBlocks.from_dict(p) for p in payloads]
        self.variance = assemble_stacked(self.blocks, self.regime)
        self.variance.naive_cov = naive_variance(self.blocks)

    def finish(self, transcript: Transcript | None = None):
        if self.done_rounds != len(self.plan) or self.variance is None:
            raise CorruptTranscript(f"protocol stopped after round {self.done_rounds} of {len(self.plan)}")
        fit = FitResult(self.theta.copy(), self.sigma, self.estimator, self.done_rounds, transcript,
                        self.model.coefficient_names())
        return fit, self.variance


# -------------------------------------------------------------- orchestration


def _per_site(weighting, sites: Sequence[SiteDataset]) -> list:
    if isinstance(weighting, Mapping):
        return [weighting[s.site_id] for s in sites]
    if isinstance(weighting, (list, tuple)):
        if len(weighting) != len(sites):
            raise ValueError("one weighting formula per site is required")
        return list(weighting)
    return [weighting] * len(sites)


def _regime(estimator: EstimatorChoice, weighting) -> str:
    if estimator.estimator == "CC" or isinstance(weighting, KnownWeights):
        return "cc"
    return "site_specific" if estimator.estimator == "IPW_site" else "calibrated"


def _in_context(exc: FedMissError, where: str, transcript: Transcript) -> FedMissError:
    """Prefix the error with its round and keep the messages exchanged so far on ``exc.transcript``."""
    exc.args = (f"{where}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
    exc.transcript = transcript
    return exc


def run_protocol(sites: Sequence[SiteDataset], model: ModelSpec, estimator: EstimatorChoice,
                 weighting=None, candidates_from="largest_site", policy: SuppressionPolicy | None = None,
                 calibration: str = "projection"):
    """Execute one federated fit and return ``(FitResult, StackedVariance, Transcript)``.

    ``weighting`` is a :class:`WeightingFormula` (or one per site, as a list
    or a mapping keyed by site id) for estimated weights, a
    :class:`KnownWeights` for fixed probabilities, and ``None`` for CC.
    A :class:`FedMissError` raised mid-protocol carries the partial
    transcript on its ``transcript`` attribute.
    """
    policy = policy or SuppressionPolicy()
    estimator.check_model(model)
    if not sites:
        raise ValueError("no sites")
    ids = [s.site_id for s in sites]
    if len(set(ids)) != len(ids):
        raise ValueError("site ids must be unique")
    if estimator.is_ipw == (weighting is None):
        raise ValueError("weighting is required for IPW and must be omitted for CC")
    if isinstance(weighting, KnownWeights) and estimator.estimator != "IPW_site":
        raise ValueError("known weights use the IPW_site protocol")
    if estimator.estimator == "CC" and model.family == "logistic" and estimator.transport == "sufficient_info":
        raise ValueError("sufficient-information transport fits the linear family only")
    header = {
        "protocol_version": PROTOCOL_VERSION,
        "estimator": estimator.estimator,
        "transport": estimator.transport,
        "model": model.to_dict(),
        "regime": _regime(estimator, weighting),
        "sites": ids,
        "policy": policy.to_dict(),
        "candidates_from": candidates_from if isinstance(candidates_from, str) else list(candidates_from),
        "calibration": calibration,
    }
    if isinstance(weighting, KnownWeights):
        formulas = [None] * len(sites)
        known = [weighting.pi[s.site_id] for s in sites]
    else:
        formulas = _per_site(weighting, sites)
        known = [None] * len(sites)
    nodes = [SiteNode(s, model, estimator, f, k, policy, calibration) for s, f, k in zip(sites, formulas, known)]
    coord = Coordinator(header)
    transcript = Transcript(header)
    for r in range(1, len(coord.plan) + 1):
        out = coord.broadcast(r)
        raw = None
        if out is not None:
            msg = RoundMessage.build(r, TO_SITES, COORD, ALL_SITES, coord.plan[r - 1][0], out)
            transcript.messages.append(msg)
            raw = msg.raw
        replies = []
        for node in nodes:
            try:
                replies.append(RoundMessage.parse(node.handle(r, raw)))
            except FedMissError as exc:
                transcript.messages.extend(replies)
                raise _in_context(exc, f"round {r}, site {node.site_id}", transcript)
        transcript.messages.extend(replies)
        try:
            coord.receive(r, replies)
        except FedMissError as exc:
            raise _in_context(exc, f"round {r}, coordinator", transcript)
    fit, var = coord.finish(transcript)
    return fit, var, transcript


def replay(transcript: Transcript):
    """Re-run the coordinator on the recorded replies only."""
    coord = Coordinator(transcript.header)
    indices = [m.round_index for m in transcript.messages]
    if indices != sorted(indices) or set(indices) != set(range(1, transcript.total_rounds + 1)):
        raise CorruptTranscript("rounds are missing or out of order")
    for r in range(1, transcript.total_rounds + 1):
        replies = [m for m in transcript.round(r) if m.direction == TO_COORD]
        try:
            coord.receive(r, replies)
        except (FedMissError, ValueError, KeyError) as exc:
            raise CorruptTranscript(f"round {r}: {exc}") from None
    return coord.finish(transcript)


def _arrays(obj, path=""):
    """Yield ``(path, shape)`` for every numeric array inside a payload."""
    if isinstance(obj, dict):
        if set(obj) == {"shape", "data"}:
            yield path, tuple(obj["shape"])
            return
        for k, v in obj.items():
            if k == "rows":
                continue
            yield from _arrays(v, f"{path}.{k}" if path else k)
    elif isinstance(obj, list):
        if obj and all(isinstance(v, (int, float)) for v in obj):
            yield path, (len(obj),)
        else:
            for i, v in enumerate(obj):
                yield from _arrays(v, f"{path}[{i}]")


def privacy_audit(transcript: Transcript, policy: SuppressionPolicy | None = None) -> dict:
    """Check disclosure rules and summarise payload granularity per round.

    A violation is a count row below ``T``, or a numeric array longer than
    the parameter dimension of the run (which would mean a payload is
    enumerating rows).
    """
    policy = policy or SuppressionPolicy(transcript.header.get("policy", {}).get("T", 11))
    violations = []
    model = ModelSpec.from_dict(transcript.header["model"])
    uploaded = sum(len(c["alpha"]) for m in transcript.messages if m.kind == "candidate_models"
                   for c in m.payload["candidates"])
    limit = model.theta_dim + uploaded
    for m in transcript.messages:
        if m.kind == "variance_blocks":
            limit = max(limit, m.payload["dims"]["theta_dim"] + sum(m.payload["dims"]["alpha_dims"]))
    rounds = {}
    for m in transcript.messages:
        info = rounds.setdefault(m.round_index, {"round": m.round_index, "kinds": [], "max_shape": [0], "bytes": 0})
        if m.kind not in info["kinds"]:
            info["kinds"].append(m.kind)
        info["bytes"] += len(m.raw)
        if m.kind == "count_rows":
            for row in m.payload["rows"]:
                if row["n_raw"] < policy.T:
                    violations.append({"round": m.round_index, "site": m.sender,
                                       "rule": f"count row with n_raw={row['n_raw']} below T={policy.T}",
                                       "u": row["u"]})
        for path, shape in _arrays(m.payload):
            if max(shape) > limit:
                violations.append({"round": m.round_index, "site": m.sender,
                                   "rule": f"array {path} of shape {list(shape)} exceeds parameter dimension {limit}"})
            if int(np.prod(shape)) > int(np.prod(info["max_shape"])):
                info["max_shape"] = list(shape)
    return {"T": policy.T, "passed": not violations, "violations": violations,
            "rounds": [rounds[k] for k in sorted(rounds)]}
