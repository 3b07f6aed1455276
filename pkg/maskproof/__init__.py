"""maskproof: verifiable machine unlearning with masked training proofs."""
from .config import Settings
from .errors import MaskProofError
from .protocol import (DataOwner, Session, Trainer, Transcript, init_session, run_round, submit_request,
                       verify_transcript)

__version__ = "0.1.0"

__all__ = ["DataOwner", "MaskProofError", "Session", "Settings", "Trainer", "Transcript", "init_session",
           "run_round", "submit_request", "verify_transcript"]
