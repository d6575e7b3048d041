"""Session runtime registry: per-session locks, model cache, persistence.

Every mutation persists (tensors first, then manifest) before the response
leaves the service, so a kill between requests never loses a committed shot.
Sessions are lazily rehydrated from disk after a restart.
"""

from __future__ import annotations

import os
import threading
import uuid

from ..config import RunConfig
from ..diffusion.checkpoint import CheckpointLoadError, load_checkpoint
from ..embed import Embedder
from ..engine import Session, start_session


class SessionBusy(RuntimeError):
    pass


class UnknownSession(KeyError):
    pass


class UnknownCheckpoint(KeyError):
    pass


class SessionRuntime:
    def __init__(self, session: Session):
        self.session = session
        self.lock = threading.Lock()


class SessionStore:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.data_dir = cfg.service.data_dir
        self.checkpoint_dir = cfg.service.checkpoint_dir
        os.makedirs(self.data_dir, exist_ok=True)
        self.embedder = Embedder(cfg.embed)
        self._models: dict[str, object] = {}
        self._sessions: dict[str, SessionRuntime] = {}
        self._registry_lock = threading.Lock()
        self.jobs: dict[str, dict] = {}

    # ---------------- models ----------------

    def load_model(self, checkpoint: str):
        if checkpoint not in self._models:
            path = os.path.join(self.checkpoint_dir, checkpoint)
            if not os.path.isfile(path):
                raise UnknownCheckpoint(checkpoint)
            try:
                model, _ = load_checkpoint(path)
            except CheckpointLoadError as exc:
                raise UnknownCheckpoint(f"{checkpoint}: {exc}") from exc
            self._models[checkpoint] = model
        return self._models[checkpoint]

    # ---------------- sessions ----------------

    def _session_dir(self, session_id: str) -> str:
        return os.path.join(self.data_dir, session_id)

    def create(self, checkpoint: str, seed: int | None) -> Session:
        model = self.load_model(checkpoint)
        with self._registry_lock:
            for _ in range(8):
                session_id = str(uuid.uuid4())
                if session_id not in self._sessions and \
                        not os.path.isdir(self._session_dir(session_id)):
                    break
            session = start_session(model, self.embedder, self.cfg.cache,
                                    self.cfg.sampler,
                                    seed=seed if seed is not None else 0,
                                    session_id=session_id,
                                    checkpoint_id=checkpoint)
            self._sessions[session_id] = SessionRuntime(session)
        session.save(self._session_dir(session_id))
        return session

    def get(self, session_id: str) -> SessionRuntime:
        with self._registry_lock:
            if session_id in self._sessions:
                return self._sessions[session_id]
        session_dir = self._session_dir(session_id)
        if not os.path.isfile(os.path.join(session_dir, "session.json")):
            raise UnknownSession(session_id)
        # rehydrate after a restart
        import json
        with open(os.path.join(session_dir, "session.json")) as fh:
            checkpoint = json.load(fh)["checkpoint_id"]
        model = self.load_model(checkpoint)
        session = Session.load(session_dir, model, self.embedder,
                               self.cfg.cache, self.cfg.sampler)
        with self._registry_lock:
            if session_id not in self._sessions:
                self._sessions[session_id] = SessionRuntime(session)
            return self._sessions[session_id]

    def persist(self, session: Session) -> None:
        session.save(self._session_dir(session.session_id))
