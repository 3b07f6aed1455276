"""Multi-round verifiable unlearning: owners, the trainer service and the transcript verifier.

Round t of a session:

1. pending owner requests (identity for owners that sent none) are folded into
   the committed mask state and proven by the mask-update circuit;
2. each epoch draws its minibatches with the trainer's VRF (SGD/MSGD) or takes
   the whole dataset (BGD);
3. every optimizer step gets a step proof and, for SGD/MSGD, a FAD proof that
   flags gradient replicas of every unlearned sample in its minibatch.

The public transcript holds commitments, schedules, statements and proofs only.
Raw rows, mask bits and witnesses stay in the trainer's encrypted vault.
"""
import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .circuits import (CircuitRegistry, FadRandomness, FadShape, FadStatement, MaskUpdateShape, MaskUpdateStatement,
                       StepRandomness, StepShape, StepStatement, shape_from_dict, synthesize_fad_witness,
                       synthesize_mask_update_witness, synthesize_witness)
from .commitments import Commitment, OpeningPath, commit_packed, hash_field, merkle_paths, root_from_path
from .config import Settings
from .constraint_system import Proof, ProofBackend, ReferenceBackend, VerifyingKey
from .errors import (BadSignature, DimMismatch, MaskProofError, MissingSignature, RoundSkew, ScheduleVerifyFailed,
                     SlotOverflow, TranscriptFormatError)
from .fixed_point import to_fixed
from .forgery_lab import minibatch_flags
from .masking import (BitMatrix, DatasetLayout, MaskKind, MaskState, OwnerRange, UnlearningRequest,
                      check_owner_ranges, commit_request, pack_bits, pack_words, request_layout,
                      request_row_bits, unpack_bits)
from .randomness import EpochSchedule, VrfKeypair, full_batch, sample_epoch, verify_epoch
from .schemas import (CircuitRecord, CommitmentLog, CommitmentRecord, FadRecord, MaskUpdateRecord, OwnerRecord,
                      RequestRecord, RoundRecord, SessionHeader, StepRecord, VerificationReport, canonical_json)
from .storage import TranscriptStore, Vault, VaultEscrow
from .training import FixedDataset, ModelParams, ModelShape, encode_eta, fixed_step

logger = logging.getLogger(__name__)

OPTIMIZERS = ("bgd", "sgd", "msgd")


def derive_randomness(secret: bytes, label: str, modulus: int) -> int:
    return int.from_bytes(hashlib.sha256(secret + b"|" + label.encode()).digest(), "big") % modulus


def epoch_id(round: int, epoch: int) -> int:
    return (round << 16) | epoch


def _hex(value: int) -> str:
    return hex(value)


def ack_message(session_id: str, owner: OwnerRange, owner_root: int, global_root: int) -> bytes:
    return canonical_json({"kind": "dataset-ack", "session_id": session_id, "owner_id": owner.owner_id,
                           "start": owner.start, "stop": owner.stop, "owner_root": _hex(owner_root),
                           "global_root": _hex(global_root)})


def request_message(session_id: str, owner_id: str, round: int, commitment_root: int) -> bytes:
    return canonical_json({"kind": "unlearning-request", "session_id": session_id, "owner_id": owner_id,
                           "round": round, "commitment": _hex(commitment_root)})


def verify_signature(public_key: str, signature: str, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(bytes.fromhex(public_key)).verify(bytes.fromhex(signature), message)
        return True
    except (InvalidSignature, ValueError):
        return False


def session_fingerprint(settings: dict, owners: Sequence[Tuple[str, int, int, str, int]], vrf_public_key: int) -> str:
    payload = {"settings": settings, "vrf": _hex(vrf_public_key),
               "owners": [[oid, start, stop, pk, _hex(root)] for oid, start, stop, pk, root in owners]}
    return hashlib.sha256(canonical_json(payload)).hexdigest()[:32]


def model_shape(settings: Settings) -> ModelShape:
    if settings.model == "lr":
        return ModelShape("lr", settings.features)
    return ModelShape("nn", settings.features, settings.hidden, settings.classes)


def class_width(settings: Settings) -> int:
    return settings.classes if settings.model == "nn" else 0


def identity_request_commitment(owner: OwnerRange, settings: Settings) -> int:
    """Commitment an owner without a request contributes: identity bits under randomness 0"""
    request = UnlearningRequest(owner.owner_id, 0)
    bits = request_row_bits(request, owner.n_rows, settings.features, settings.granularity, class_width(settings))
    layout = request_layout(owner.n_rows, settings.features, settings.granularity, class_width(settings))
    return commit_packed(pack_words(bits, layout), 0, settings.modulus).root


def initial_state(n_rows: int, settings: Settings) -> MaskState:
    return MaskState.initial(n_rows, settings.features, settings.granularity, class_width(settings))


def _commitment_record(com: Commitment) -> CommitmentRecord:
    return CommitmentRecord(**com.to_dict())


# ---------------------------------------------------------------------------
# data owners

class DataOwner:
    """Holds rows, an Ed25519 key and the randomness of the owner's own commitments"""

    def __init__(self, owner_id: str, dataset: FixedDataset, seed: bytes):
        self.owner_id = owner_id
        self.dataset = dataset
        self._seed = seed
        digest = hashlib.sha256(b"maskproof.owner|" + seed + b"|" + owner_id.encode()).digest()
        self._key = Ed25519PrivateKey.from_private_bytes(digest)

    @property
    def public_key(self) -> str:
        return self._key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw).hex()

    def sign(self, message: bytes) -> bytes:
        return self._key.sign(message)

    def commitment(self) -> Commitment:
        r = derive_randomness(self._seed, f"owner-dataset:{self.owner_id}", self.dataset.cfg.modulus)
        return self.dataset.commit(r)

    def acknowledge(self, session_id: str, owner: OwnerRange, global_root: int, dataset_randomness: int,
                    paths: Sequence[OpeningPath]) -> str:
        """Check that every own row sits at its place in the global commitment, then sign it"""
        p = self.dataset.cfg.modulus
        digests = self.dataset.row_digests()
        if len(paths) != len(digests) or owner.n_rows != len(digests):
            raise MissingSignature(f"owner {self.owner_id!r} got {len(paths)} openings for {len(digests)} rows")
        for offset, (digest, path) in enumerate(zip(digests, paths)):
            index = owner.start + offset
            leaf = hash_field([digest, dataset_randomness, index], p)
            if path.index != index or root_from_path(leaf, path, p) != global_root:
                raise MissingSignature(f"owner {self.owner_id!r} refuses to sign: row {index} does not open")
        message = ack_message(session_id, owner, self.commitment().root, global_root)
        return self.sign(message).hex()

    def request(self, session_id: str, round: int, masks: Mapping[MaskKind, BitMatrix], settings: Settings,
                randomness: Optional[int] = None) -> UnlearningRequest:
        """Commit to the owner-local masks and sign the commitment (never the bits)"""
        if randomness is None:
            randomness = derive_randomness(self._seed, f"request:{self.owner_id}:{round}", settings.modulus)
        masks = {MaskKind(k): v if isinstance(v, BitMatrix) else BitMatrix(k, v, round) for k, v in masks.items()}
        request = UnlearningRequest(self.owner_id, round, masks, randomness)
        com = commit_request(request, self.dataset.n_rows, settings.features, settings.granularity,
                             class_width(settings), settings.modulus)
        signature = self.sign(request_message(session_id, self.owner_id, round, com.root))
        return replace(request, commitment=com, signature=signature)


# ---------------------------------------------------------------------------
# sessions and transcripts

@dataclass
class Session:
    session_id: str
    settings: Settings
    layout: DatasetLayout
    owners: Tuple[OwnerRecord, ...]
    vrf_public_key: int
    dataset: Commitment
    model_chain: List[int]
    state_chain: List[int]
    round: int = 0


@dataclass
class RoundTranscript:
    record: Optional[RoundRecord]
    schedules: List[dict] = field(default_factory=list)
    mask_update: Optional[MaskUpdateRecord] = None
    steps: List[StepRecord] = field(default_factory=list)
    fads: List[FadRecord] = field(default_factory=list)


@dataclass
class Transcript:
    header: SessionHeader
    log: CommitmentLog
    rounds: Dict[int, RoundTranscript] = field(default_factory=dict)

    def save(self, root: Path) -> Path:
        store = TranscriptStore(root)
        store.write_header(self.header)
        store.write_log(self.log)
        for t, rt in self.rounds.items():
            if rt.schedules:
                store.write_schedules(t, rt.schedules)
            if rt.mask_update is not None:
                store.write_mask_update(rt.mask_update)
            for record in rt.steps:
                store.write_step(record)
            for record in rt.fads:
                store.write_fad(record)
        return Path(root)

    @classmethod
    def load(cls, root: Path) -> "Transcript":
        store = TranscriptStore(root)
        header = store.read_header()
        log = store.read_log()
        records = {r.round: r for r in log.rounds}
        rounds = {}
        for t in sorted(set(records) | set(store.rounds())):
            rounds[t] = RoundTranscript(records.get(t), store.read_schedules(t), store.read_mask_update(t),
                                        store.read_steps(t), store.read_fads(t))
        return cls(header, log, rounds)


# ---------------------------------------------------------------------------
# trainer

class Trainer:
    """The single writer of a session: commits data, applies requests, trains and proves"""

    def __init__(self, settings: Settings, backend: Optional[ProofBackend] = None, persist: bool = True):
        self.settings = settings
        self.cfg = settings.fixed
        self.secret = settings.secret
        self.vrf = VrfKeypair.from_seed(self.secret + b"|vrf", settings.modulus)
        self.registry = CircuitRegistry()
        self.persist = persist
        self._backend = backend
        self.backend: Optional[ProofBackend] = backend
        self.vault: Optional[Vault] = None
        self.session: Optional[Session] = None
        self.transcript: Optional[Transcript] = None
        self.pending: Dict[str, UnlearningRequest] = {}
        self.dataset: Optional[FixedDataset] = None
        self.params: Optional[ModelParams] = None
        self.state: Optional[MaskState] = None
        self.dataset_randomness = 0
        self.model_randomness = 0
        self.state_randomness = 0

    @property
    def shape(self) -> ModelShape:
        return model_shape(self.settings)

    def _rand(self, label: str) -> int:
        return derive_randomness(self.secret, f"{self.session.session_id}:{label}", self.cfg.modulus)

    def _open_vault(self, session_id: str) -> None:
        self.vault = Vault(self.settings.resolved_database_url, session_id, self.secret)
        if self._backend is None:
            self.backend = ReferenceBackend(escrow=VaultEscrow(self.vault), resolver=self.registry.resolve)

    # -- session setup -----------------------------------------------------
    def init_session(self, owners: Sequence[DataOwner], initial_params: Optional[ModelParams] = None) -> Session:
        if not owners:
            raise DimMismatch("a session needs at least one data owner")
        s, cfg = self.settings, self.cfg
        ranges, cursor = [], 0
        for owner in owners:
            ranges.append(OwnerRange(owner.owner_id, cursor, cursor + owner.dataset.n_rows))
            cursor += owner.dataset.n_rows
        check_owner_ranges(ranges, cursor)
        first = owners[0].dataset
        for owner in owners:
            if owner.dataset.n_features != s.features or owner.dataset.task != first.task:
                raise DimMismatch(f"owner {owner.owner_id!r} data does not match the session model")
        dataset = FixedDataset(np.vstack([o.dataset.features for o in owners]),
                               np.vstack([o.dataset.labels for o in owners]), first.task, tuple(ranges), cfg)
        if dataset.n_labels != self.shape.label_width:
            raise DimMismatch(f"datasets carry {dataset.n_labels} labels, the model expects {self.shape.label_width}")

        local = [o.commitment() for o in owners]
        public = s.public_dict()
        session_id = session_fingerprint(public, [(o.owner_id, r.start, r.stop, o.public_key, c.root)
                                                  for o, r, c in zip(owners, ranges, local)], self.vrf.public_key)
        self.session = Session(session_id, s, dataset.layout(), (), self.vrf.public_key, None, [], [])
        self.dataset = dataset
        self.dataset_randomness = self._rand("dataset")
        p = cfg.modulus
        leaves = [hash_field([d, self.dataset_randomness, i], p) for i, d in enumerate(dataset.row_digests())]
        dataset_com = dataset.commit(self.dataset_randomness)
        paths = merkle_paths(leaves, range(dataset.n_rows), p)

        records = []
        for owner, entry, com in zip(owners, ranges, local):
            ack = owner.acknowledge(session_id, entry, dataset_com.root, self.dataset_randomness,
                                    paths[entry.start:entry.stop])
            if not ack:
                raise MissingSignature(f"owner {owner.owner_id!r} did not acknowledge the dataset commitment")
            records.append(OwnerRecord(owner_id=owner.owner_id, start=entry.start, stop=entry.stop,
                                       public_key=owner.public_key, dataset=_commitment_record(com),
                                       acknowledgement=ack))

        if initial_params is None:
            initial_params = ModelParams.random(self.shape, np.random.default_rng(s.seed))
        self.params = initial_params.encode(cfg)
        self.model_randomness = self._rand("model:0:0")
        self.state = initial_state(dataset.n_rows, s)
        self.state_randomness = 0
        model_root = self.params.commit(self.model_randomness, cfg).root
        state_root = self.state.commit(0, p).root

        self.session = Session(session_id, s, dataset.layout(), tuple(records), self.vrf.public_key, dataset_com,
                               [model_root], [state_root])
        self.registry.pin(self._mask_update_shape())
        header = SessionHeader(session_id=session_id, settings=public, task=dataset.task, n_rows=dataset.n_rows,
                               vrf_public_key=_hex(self.vrf.public_key), dataset=_commitment_record(dataset_com),
                               owners=records, initial_model=_hex(model_root), initial_state=_hex(state_root))
        self.transcript = Transcript(header, CommitmentLog(session_id=session_id))
        self._open_vault(session_id)
        self._save_private()
        self._write_public()
        logger.info(f"Session {session_id}: {len(owners)} owners, {dataset.n_rows} rows committed")
        return self.session

    def _mask_update_shape(self) -> MaskUpdateShape:
        layout = self.state.layout()
        return MaskUpdateShape(tuple(o.n_rows for o in self.session.layout.owners), layout.removal_width,
                               layout.class_width, self.cfg)

    # -- requests ------------------------------------------------------------
    def submit_request(self, request: UnlearningRequest) -> Dict[str, UnlearningRequest]:
        """Verify and queue a request for the next round"""
        if self.session is None:
            raise MaskProofError("no active session")
        s = self.settings
        entry = self.session.layout.owner(request.owner_id)
        round = self.session.round + 1
        if request.round != round:
            raise RoundSkew(f"request targets round {request.round}, the next round is {round}")
        com = commit_request(request, entry.n_rows, s.features, s.granularity, class_width(s), s.modulus)
        if request.commitment is not None and request.commitment.root != com.root:
            raise BadSignature("request commitment does not match the revealed masks")
        owner = next(o for o in self.session.owners if o.owner_id == request.owner_id)
        if not request.signature or not verify_signature(owner.public_key, request.signature.hex(),
                                                         request_message(self.session.session_id,
                                                                         request.owner_id, round, com.root)):
            raise BadSignature(f"request of {request.owner_id!r} is not signed by the owner")
        if request.owner_id in self.pending:
            logger.warning(f"Replacing the pending request of {request.owner_id!r} for round {round}")
        self.pending[request.owner_id] = replace(request, commitment=com)
        self._save_private()
        logger.info(f"Queued request of {request.owner_id!r} for round {round}")
        return dict(self.pending)

    # -- rounds --------------------------------------------------------------
    def run_round(self, optimizer: Optional[str] = None, epochs: Optional[int] = None,
                  learning_rate: Optional[float] = None, xi: Optional[float] = None) -> RoundTranscript:
        if self.session is None:
            raise MaskProofError("no active session")
        s = self.settings
        optimizer = optimizer or s.optimizer
        if optimizer not in OPTIMIZERS:
            raise DimMismatch(f"unknown optimizer {optimizer!r}")
        epochs = epochs or s.epochs
        eta = encode_eta(s.learning_rate if learning_rate is None else learning_rate, self.cfg)
        xi_enc = to_fixed(s.xi if xi is None else xi, self.cfg)
        if xi_enc < 0:
            raise DimMismatch("detection threshold must be non-negative")
        t = self.session.round + 1
        logger.info(f"Round {t}: {optimizer} for {epochs} epochs, {len(self.pending)} pending requests")

        rt = RoundTranscript(None)
        prove_fad = optimizer != "bgd"
        request_records = self._apply_requests(t, rt, prove_fad)
        n = self.dataset.n_rows
        unlearned = [int(i) for i in np.flatnonzero(self.state.survivors() == 0)]
        models = []
        for e in range(epochs):
            if optimizer == "bgd":
                batches = full_batch(n)
            else:
                size = 1 if optimizer == "sgd" else min(s.batch_size, n)
                schedule = sample_epoch(self.vrf, self.session.session_id, epoch_id(t, e), n, size, s.n_jobs)
                if not verify_epoch(self.vrf.public_key, self.session.session_id, epoch_id(t, e), schedule, s.modulus):
                    raise ScheduleVerifyFailed(f"round {t} epoch {e}: schedule does not replay")
                rt.schedules.append(schedule.model_dump(mode="json"))
                batches = schedule.minibatches
            for batch in batches:
                models.append(self._prove_step(t, len(rt.steps), e, batch, eta, xi_enc, prove_fad, unlearned, rt))

        record = RoundRecord(round=t, optimizer=optimizer, epochs=epochs, learning_rate=eta, xi=xi_enc,
                             requests=request_records, state=_hex(self.session.state_chain[-1]),
                             models=[_hex(m) for m in models], steps=len(rt.steps))
        rt.record = record
        self.transcript.log = self.transcript.log.model_copy(update={"rounds": self.transcript.log.rounds + [record]})
        self.transcript.rounds[t] = rt
        self.session.round = t
        self.pending = {}
        self._save_private()
        self._write_public(t)
        logger.info(f"Round {t} done: {len(rt.steps)} steps, {len(unlearned)} rows unlearned so far")
        return rt

    def _apply_requests(self, t: int, rt: RoundTranscript, detect: bool) -> List[RequestRecord]:
        s, p = self.settings, self.cfg.modulus
        bits, randomness, records = [], [], []
        for entry in self.session.layout.owners:
            request = self.pending.get(entry.owner_id)
            if request is None:
                local = request_row_bits(UnlearningRequest(entry.owner_id, t), entry.n_rows, s.features,
                                         s.granularity, class_width(s))
                bits.append(local)
                randomness.append(0)
                records.append(RequestRecord(owner_id=entry.owner_id,
                                             commitment=_hex(identity_request_commitment(entry, s))))
            else:
                bits.append(request_row_bits(request, entry.n_rows, s.features, s.granularity, class_width(s)))
                randomness.append(request.randomness)
                records.append(RequestRecord(owner_id=entry.owner_id, commitment=_hex(request.commitment.root),
                                             signature=request.signature.hex()))
        full = np.vstack(bits)
        prev, prev_r = self.state, self.state_randomness
        width = prev.layout().removal_width
        classes = BitMatrix(MaskKind.CLASS, full[:, width:], t) if prev.classes is not None else None
        state = prev.advance(BitMatrix(prev.removal.kind, full[:, :width], t), classes)
        removed = int((state.survivors() == 0).sum())
        if detect and removed > s.fad_slots:
            raise SlotOverflow(f"round {t} would unlearn {removed} rows, the detection circuit holds {s.fad_slots}")
        self.state = state
        self.state_randomness = self._rand(f"state:{t}")
        new_root = self.state.commit(self.state_randomness, p).root

        circuit = self.registry.pin(self._mask_update_shape())
        witness = synthesize_mask_update_witness(circuit, prev, bits, randomness, prev_r, self.state_randomness)
        proof = self.backend.prove(circuit, witness)
        if proof.public_inputs[1] != new_root:
            raise MaskProofError("mask-update circuit and mask state disagree")
        rt.mask_update = MaskUpdateRecord(round=t, prev_state=_hex(self.session.state_chain[-1]),
                                          new_state=_hex(new_root), requests=[r.commitment for r in records],
                                          circuit=circuit.digest, proof=proof.to_bytes().hex())
        self.session.state_chain.append(new_root)
        return records

    def _prove_step(self, t: int, k: int, epoch: int, batch: Sequence[int], eta: int, xi_enc: int, prove_fad: bool,
                    unlearned: List[int], rt: RoundTranscript) -> int:
        cfg, ds, state = self.cfg, self.dataset, self.state
        batch = [int(i) for i in batch]
        class_masked = state.classes is not None
        shape = StepShape(self.shape, len(batch), ds.n_rows, self.settings.granularity, class_masked, cfg)
        circuit = self.registry.pin(shape)
        allow_empty = prove_fad
        trace = fixed_step(self.params, [ds.features[i] for i in batch], [ds.labels[i] for i in batch], eta, cfg,
                           [state.removal.bits[i] for i in batch],
                           [state.classes.bits[i] for i in batch] if class_masked else None, allow_empty,
                           feature_masked=self.settings.granularity == "feature")
        r_in, r_out = self.model_randomness, self._rand(f"model:{t}:{k + 1}")
        witness = synthesize_witness(circuit, ds, state, self.params, eta, indices=batch,
                                     randomness=StepRandomness(self.dataset_randomness, r_in, r_out,
                                                               self.state_randomness),
                                     allow_empty=allow_empty)
        proof = self.backend.prove(circuit, witness)
        model_in = self.session.model_chain[-1]
        model_out = trace.params_out.commit(r_out, cfg).root
        if proof.public_inputs[2] != model_out:
            raise MaskProofError("step circuit and fixed-point twin disagree")
        state_root = self.session.state_chain[-1]
        rt.steps.append(StepRecord(round=t, step=k, epoch=epoch, indices=batch, eta=eta, model_in=_hex(model_in),
                                   model_out=_hex(model_out), state=_hex(state_root), circuit=circuit.digest,
                                   proof=proof.to_bytes().hex()))
        if prove_fad:
            rt.fads.append(self._prove_fad(t, k, batch, xi_enc, unlearned, r_in, model_in, state_root))
        self.params = trace.params_out
        self.model_randomness = r_out
        self.session.model_chain.append(model_out)
        return model_out

    def _prove_fad(self, t: int, k: int, batch: List[int], xi_enc: int, unlearned: List[int], r_model: int,
                   model_root: int, state_root: int) -> FadRecord:
        cfg, ds, state = self.cfg, self.dataset, self.state
        shape = FadShape(self.shape, len(batch), ds.n_rows, xi_enc, self.settings.fad_slots,
                         self.settings.granularity, state.classes is not None, cfg)
        circuit = self.registry.pin(shape)
        witness = synthesize_fad_witness(circuit, ds, state, self.params, indices=batch, unlearned=unlearned,
                                         randomness=FadRandomness(self.dataset_randomness, r_model,
                                                                  self.state_randomness))
        proof = self.backend.prove(circuit, witness)
        flags = list(proof.public_inputs[3 + len(batch):])
        if flags != minibatch_flags(ds, batch, unlearned, xi_enc, self.params, state):
            raise MaskProofError("detection circuit and plain detector disagree")
        hits = sum(flags)
        if hits:
            logger.warning(f"Round {t} step {k}: {hits} gradient replica(s) of unlearned samples in the minibatch")
        return FadRecord(round=t, step=k, indices=batch, model=_hex(model_root), state=_hex(state_root),
                         flags=flags, circuit=circuit.digest, proof=proof.to_bytes().hex())

    # -- persistence ---------------------------------------------------------
    def _write_public(self, t: Optional[int] = None) -> None:
        circuits = [CircuitRecord(**entry) for entry in self.registry.entries()]
        self.transcript.header = self.transcript.header.model_copy(update={"circuits": circuits})
        if not self.persist:
            return
        store = TranscriptStore(self.settings.resolved_transcript_dir)
        store.write_header(self.transcript.header)
        store.write_log(self.transcript.log)
        if t is not None:
            Transcript(self.transcript.header, self.transcript.log, {t: self.transcript.rounds[t]}).save(store.root)

    def _save_private(self) -> None:
        state = self.state
        self.vault.put_json("trainer", "state", {
            "round": self.session.round,
            "params": self.params.to_checkpoint(self.cfg).hex(),
            "model_randomness": self.model_randomness,
            "dataset_randomness": self.dataset_randomness,
            "state_randomness": self.state_randomness,
            "removal": pack_bits(state.removal).hex(),
            "classes": pack_bits(state.classes).hex() if state.classes is not None else None,
            "model_chain": [_hex(v) for v in self.session.model_chain],
            "state_chain": [_hex(v) for v in self.session.state_chain],
        })
        ds = self.dataset
        self.vault.put_json("dataset", "rows", {
            "task": ds.task, "features": [[int(v) for v in row] for row in ds.features],
            "labels": [[int(v) for v in row] for row in ds.labels]})
        self.vault.put_json("requests", "pending", {owner: _request_to_dict(r) for owner, r in self.pending.items()})
        for owner, request in self.pending.items():
            self.vault.put_json("request", f"{self.session.round + 1}:{owner}", _request_to_dict(request))

    @classmethod
    def resume(cls, settings: Settings, backend: Optional[ProofBackend] = None) -> "Trainer":
        """Rebuild a trainer from its transcript directory and vault"""
        trainer = cls(settings, backend)
        transcript = Transcript.load(settings.resolved_transcript_dir)
        header = transcript.header
        trainer._open_vault(header.session_id)
        state = trainer.vault.get_json("trainer", "state")
        rows = trainer.vault.get_json("dataset", "rows")
        if state is None or rows is None:
            raise TranscriptFormatError(f"vault has no trainer state for session {header.session_id}")
        owners = tuple(OwnerRange(o.owner_id, o.start, o.stop) for o in header.owners)
        cfg = trainer.cfg
        trainer.dataset = FixedDataset(np.array(rows["features"], dtype=object), np.array(rows["labels"], dtype=object),
                                       rows["task"], owners, cfg)
        trainer.params = ModelParams.from_checkpoint(bytes.fromhex(state["params"]), cfg)
        classes = unpack_bits(bytes.fromhex(state["classes"])) if state["classes"] else None
        trainer.state = MaskState(unpack_bits(bytes.fromhex(state["removal"])), classes)
        trainer.model_randomness = state["model_randomness"]
        trainer.dataset_randomness = state["dataset_randomness"]
        trainer.state_randomness = state["state_randomness"]
        trainer.session = Session(header.session_id, settings, trainer.dataset.layout(), tuple(header.owners),
                                  int(header.vrf_public_key, 16), Commitment.from_dict(header.dataset.model_dump()),
                                  [int(v, 16) for v in state["model_chain"]],
                                  [int(v, 16) for v in state["state_chain"]], state["round"])
        trainer.transcript = transcript
        for entry in header.circuits:
            trainer.registry.pin(_shape_of(entry))
        pending = trainer.vault.get_json("requests", "pending") or {}
        trainer.pending = {owner: _request_from_dict(owner, data) for owner, data in pending.items()}
        logger.info(f"Resumed session {header.session_id} after round {trainer.session.round}")
        return trainer


def _shape_of(entry: CircuitRecord):
    return shape_from_dict(entry.shape)


def _request_to_dict(request: UnlearningRequest) -> dict:
    return {"round": request.round, "randomness": request.randomness,
            "masks": {MaskKind(k).value: pack_bits(b).hex() for k, b in request.masks.items()},
            "commitment": request.commitment.to_dict() if request.commitment else None,
            "signature": request.signature.hex()}


def _request_from_dict(owner_id: str, data: dict) -> UnlearningRequest:
    return UnlearningRequest(owner_id, data["round"],
                             {MaskKind(k): unpack_bits(bytes.fromhex(v)) for k, v in data["masks"].items()},
                             data["randomness"],
                             Commitment.from_dict(data["commitment"]) if data["commitment"] else None,
                             bytes.fromhex(data["signature"]))


# ---------------------------------------------------------------------------
# module-level operations

def init_session(owners: Sequence[DataOwner], trainer: Trainer,
                 initial_params: Optional[ModelParams] = None) -> Session:
    return trainer.init_session(owners, initial_params)


def submit_request(trainer: Trainer, request: UnlearningRequest) -> Dict[str, UnlearningRequest]:
    return trainer.submit_request(request)


def run_round(trainer: Trainer, optimizer: Optional[str] = None, epochs: Optional[int] = None,
              learning_rate: Optional[float] = None, xi: Optional[float] = None) -> RoundTranscript:
    return trainer.run_round(optimizer, epochs, learning_rate, xi)


# ---------------------------------------------------------------------------
# verification

class _Failure(Exception):
    def __init__(self, locus: str, reason: str):
        super().__init__(f"{locus}: {reason}")
        self.locus = locus
        self.reason = reason


def _check(condition: bool, locus: str, reason: str) -> None:
    if not condition:
        raise _Failure(locus, reason)


class TranscriptVerifier:
    """Checks a transcript in a fixed order and reports the first failure"""

    def __init__(self, transcript: Transcript, backend: Optional[ProofBackend],
                 public_commitments: Optional[Mapping[str, str]] = None):
        self.transcript = transcript
        self.header = transcript.header
        self.backend = backend
        self.public = dict(public_commitments or {})
        self.report = VerificationReport(ok=True)
        self.registry = CircuitRegistry()

    def run(self) -> VerificationReport:
        stages = [("signatures", self._signatures), ("circuit digests", self._circuit_digests),
                  ("vrf schedules", self._schedules), ("proofs", self._proofs), ("mask chain", self._mask_chain),
                  ("model chain", self._model_chain)]
        try:
            self._prepare()
            for name, stage in stages:
                stage()
                self.report = self.report.model_copy(update={"checked": self.report.checked + [name]})
        except _Failure as e:
            logger.error(f"Transcript rejected at {e.locus}: {e.reason}")
            return self.report.fail(e.locus, e.reason)
        except (MaskProofError, ValueError, KeyError, TypeError) as e:
            logger.error(f"Transcript rejected: {e}")
            return self.report.fail("transcript", str(e))
        logger.info(f"Transcript {self.header.session_id} verified ({len(self.rounds)} rounds)")
        return self.report

    def _prepare(self) -> None:
        header = self.header
        self.settings = Settings(**header.settings)
        self.p = self.settings.modulus
        self.shape = model_shape(self.settings)
        self.rounds = [self.transcript.rounds[t] for t in sorted(self.transcript.rounds)]
        numbers = sorted(self.transcript.rounds)
        _check(numbers == list(range(1, len(numbers) + 1)), "commitments.json", "round numbers have gaps")
        _check([r.round for r in self.transcript.log.rounds] == numbers, "commitments.json",
               "round log does not match the round directories")
        _check(self.transcript.log.session_id == header.session_id, "commitments.json", "session id mismatch")
        for rt in self.rounds:
            _check(rt.record is not None and rt.mask_update is not None, f"round-{rt.record and rt.record.round}",
                   "round is missing its record or mask-update proof")
        self.owners = tuple(OwnerRange(o.owner_id, o.start, o.stop) for o in header.owners)
        self.layout = request_layout(header.n_rows, self.settings.features, self.settings.granularity,
                                     class_width(self.settings))

    # 1
    def _signatures(self) -> None:
        header = self.header
        try:
            check_owner_ranges(self.owners, header.n_rows)
        except MaskProofError as e:
            raise _Failure("session.json/owners", str(e))
        fingerprint = session_fingerprint(header.settings, [(o.owner_id, o.start, o.stop, o.public_key,
                                                             int(o.dataset.root, 16)) for o in header.owners],
                                          int(header.vrf_public_key, 16))
        _check(fingerprint == header.session_id, "session.json", "session id does not match its contents")
        global_root = int(header.dataset.root, 16)
        for record, entry in zip(header.owners, self.owners):
            locus = f"session.json/owners/{record.owner_id}"
            _check(bool(record.acknowledgement), locus, "missing dataset acknowledgement")
            message = ack_message(header.session_id, entry, int(record.dataset.root, 16), global_root)
            _check(verify_signature(record.public_key, record.acknowledgement, message), locus,
                   "dataset acknowledgement does not verify")
        keys = {o.owner_id: o.public_key for o in header.owners}
        for rt in self.rounds:
            t = rt.record.round
            _check([r.owner_id for r in rt.record.requests] == [o.owner_id for o in self.owners],
                   f"commitments.json/round-{t}", "requests do not list every owner in order")
            for request, entry in zip(rt.record.requests, self.owners):
                locus = f"commitments.json/round-{t}/{request.owner_id}"
                root = int(request.commitment, 16)
                if request.signature:
                    message = request_message(header.session_id, request.owner_id, t, root)
                    _check(verify_signature(keys[request.owner_id], request.signature, message), locus,
                           "request signature does not verify")
                else:
                    _check(root == identity_request_commitment(entry, self.settings), locus,
                           "unsigned request is not the identity")

    # 2
    def _expected_shapes(self, rt: RoundTranscript):
        cfg = self.settings.fixed
        n = self.header.n_rows
        class_masked = class_width(self.settings) > 0
        mask_shape = MaskUpdateShape(tuple(o.n_rows for o in self.owners), self.layout.removal_width,
                                     self.layout.class_width, cfg)
        yield f"round-{rt.record.round}/mask-update.proof", rt.mask_update.circuit, mask_shape
        for s in rt.steps:
            yield (f"round-{s.round}/step-{s.step}.proof", s.circuit,
                   StepShape(self.shape, len(s.indices), n, self.settings.granularity, class_masked, cfg))
        for f in rt.fads:
            yield (f"round-{f.round}/fad-{f.step}.proof", f.circuit,
                   FadShape(self.shape, len(f.indices), n, rt.record.xi, self.settings.fad_slots,
                            self.settings.granularity, class_masked, cfg))

    def _circuit_digests(self) -> None:
        pinned = {entry.key: entry for entry in self.header.circuits}
        for entry in self.header.circuits:
            circuit = self.registry.pin(_shape_of(entry))
            _check(circuit.name == entry.key and circuit.digest == entry.digest, "session.json/circuits",
                   f"pinned digest of {entry.key} does not match its shape")
        for rt in self.rounds:
            for locus, digest, shape in self._expected_shapes(rt):
                _check(shape.key() in pinned, locus, f"circuit {shape.key()} is not pinned")
                _check(digest == pinned[shape.key()].digest, locus, "proof cites a circuit other than the pinned one")

    # 3
    def _schedules(self) -> None:
        n, pk = self.header.n_rows, int(self.header.vrf_public_key, 16)
        for rt in self.rounds:
            record, t = rt.record, rt.record.round
            if record.optimizer == "bgd":
                _check(not rt.schedules, f"round-{t}/schedule.bin", "full-batch rounds draw no schedule")
                expected = [(e, list(range(n))) for e in range(record.epochs)]
            else:
                _check(len(rt.schedules) == record.epochs, f"round-{t}/schedule.bin", "one schedule per epoch")
                size = 1 if record.optimizer == "sgd" else min(self.settings.batch_size, n)
                expected = []
                for e, payload in enumerate(rt.schedules):
                    locus = f"round-{t}/schedule.bin/epoch-{e}"
                    schedule = EpochSchedule.model_validate(payload)
                    _check(schedule.n_rows == n and schedule.batch_size == size, locus, "schedule has the wrong shape")
                    _check(verify_epoch(pk, self.header.session_id, epoch_id(t, e), schedule, self.p), locus,
                           "VRF replay rejects the schedule")
                    expected += [(e, batch) for batch in schedule.minibatches]
            found = [(s.epoch, list(s.indices)) for s in rt.steps]
            _check(found == expected, f"round-{t}/steps", "step minibatches differ from the verified schedule")
            if record.optimizer != "bgd":
                _check([f.indices for f in rt.fads] == [s.indices for s in rt.steps], f"round-{t}/fad",
                       "detection proofs do not cover every step minibatch")

    # 4
    def _verify_proof(self, locus: str, digest: str, publics: Tuple[int, ...], proof_hex: str) -> None:
        circuit = self.registry.resolve(digest)
        _check(circuit is not None, locus, "unknown circuit")
        try:
            proof = Proof.from_bytes(bytes.fromhex(proof_hex))
        except (TranscriptFormatError, ValueError) as e:
            raise _Failure(locus, f"unreadable proof: {e}")
        ok = self.backend.verify(VerifyingKey(digest, circuit.num_public), publics, proof)
        _check(ok, locus, "proof does not verify")

    def _proofs(self) -> None:
        _check(self.backend is not None, "backend", "no proof backend available")
        for circuit in {c.digest: c for c in map(self.registry.resolve, self._digests()) if c}.values():
            self.backend.setup(circuit)
        root = int(self.header.dataset.root, 16)
        for rt in self.rounds:
            mu = rt.mask_update
            statement = MaskUpdateStatement(int(mu.prev_state, 16), int(mu.new_state, 16),
                                            tuple(int(r, 16) for r in mu.requests))
            self._verify_proof(f"round-{mu.round}/mask-update.proof", mu.circuit, statement.public_inputs(self.p),
                               mu.proof)
            for s in rt.steps:
                statement = StepStatement(root, int(s.model_in, 16), int(s.model_out, 16), s.eta,
                                          int(s.state, 16) if s.state else None, tuple(s.indices))
                self._verify_proof(f"round-{s.round}/step-{s.step}.proof", s.circuit, statement.public_inputs(self.p),
                                   s.proof)
            for f in rt.fads:
                statement = FadStatement(root, int(f.model, 16), int(f.state, 16), tuple(f.indices),
                                         tuple(f.flags))
                self._verify_proof(f"round-{f.round}/fad-{f.step}.proof", f.circuit, statement.public_inputs(self.p),
                                   f.proof)

    def _digests(self) -> List[str]:
        found = []
        for rt in self.rounds:
            found += [rt.mask_update.circuit] + [s.circuit for s in rt.steps] + [f.circuit for f in rt.fads]
        return found

    # 5
    def _mask_chain(self) -> None:
        initial = initial_state(self.header.n_rows, self.settings).commit(0, self.p).root
        _check(int(self.header.initial_state, 16) == initial, "session.json", "initial mask state is not the identity")
        prev = self.header.initial_state
        for rt in self.rounds:
            t, mu = rt.record.round, rt.mask_update
            locus = f"round-{t}/mask-update.proof"
            _check(mu.round == t and mu.prev_state == prev, locus, "mask update does not extend the previous state")
            _check(mu.new_state == rt.record.state, locus, "round state differs from the proven update")
            _check(mu.requests == [r.commitment for r in rt.record.requests], locus,
                   "mask update binds other request commitments")
            for s in rt.steps:
                _check(s.state == rt.record.state, f"round-{t}/step-{s.step}.proof", "step uses another mask state")
            for f in rt.fads:
                _check(f.state == rt.record.state, f"round-{t}/fad-{f.step}.proof", "detection uses another state")
            prev = rt.record.state

    # 6
    def _model_chain(self) -> None:
        current = self.header.initial_model
        for rt in self.rounds:
            t, record = rt.record.round, rt.record
            _check(len(rt.steps) == record.steps and [s.step for s in rt.steps] == list(range(record.steps)),
                   f"round-{t}/steps", "step proofs are missing or out of order")
            for s in rt.steps:
                locus = f"round-{t}/step-{s.step}.proof"
                _check(s.round == t and s.model_in == current, locus, "model commitment chain is broken")
                _check(s.eta == record.learning_rate, locus, "step uses another learning rate")
                current = s.model_out
            _check([s.model_out for s in rt.steps] == record.models, f"commitments.json/round-{t}",
                   "published model chain differs from the step proofs")
            if record.optimizer != "bgd":
                _check(len(rt.fads) == len(rt.steps), f"round-{t}/fad", "one detection proof per step is required")
                for s, f in zip(rt.steps, rt.fads):
                    _check(f.step == s.step and f.model == s.model_in, f"round-{t}/fad-{f.step}.proof",
                           "detection proof is not bound to its step")
            else:
                _check(not rt.fads, f"round-{t}/fad", "full-batch rounds carry no detection proofs")
        if "dataset" in self.public:
            _check(self.public["dataset"] == self.header.dataset.root, "public", "dataset commitment differs")
        if "model" in self.public:
            _check(self.public["model"] == current, "public", "final model commitment differs")


def verify_transcript(transcript: Transcript, backend: Optional[ProofBackend] = None,
                      public_commitments: Optional[Mapping[str, str]] = None) -> Tuple[bool, VerificationReport]:
    """Never raises on malformed evidence; the report names the first failing record"""
    report = TranscriptVerifier(transcript, backend, public_commitments).run()
    return report.ok, report


def open_backend(settings: Settings, session_id: str) -> ReferenceBackend:
    """Reference backend reading witnesses from the session vault (auditor access)"""
    vault = Vault(settings.resolved_database_url, session_id, settings.secret)
    return ReferenceBackend(escrow=VaultEscrow(vault))
