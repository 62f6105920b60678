import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FailureEntry:
    source: str
    record: Dict[str, Any]
    error_type: str
    error_message: str
    context: Dict[str, Any] = field(default_factory=dict)


class FailureLedger:
    """
    Non-fatal failures collected during a run (a basin-scan seed whose
    integration broke down, a time point where censoring failed). Entries stay
    in memory until flushed; file names are sequence numbers so reruns write
    identical files.
    """

    def __init__(self, local_path: Optional[str] = None) -> None:
        self.local_path = Path(local_path) if local_path else None
        self._entries: List[FailureEntry] = []

    def send(self, source: str, record: Dict[str, Any], error: Exception, context: Optional[Dict[str, Any]] = None) -> None:
        entry = FailureEntry(
            source=source,
            record=record,
            error_type=type(error).__name__,
            error_message=str(error),
            context=context or {},
        )
        self._entries.append(entry)
        logger.warning("[%s] %s: %s (%s)", source, entry.error_type, entry.error_message, record)

    def list_entries(self, source: Optional[str] = None) -> List[FailureEntry]:
        return [e for e in self._entries if source is None or e.source == source]

    def count(self, source: Optional[str] = None) -> int:
        return len(self.list_entries(source))

    def flush(self, local_path: Optional[str] = None) -> List[Path]:
        """Write every entry as <index>_<source>.json; returns the written paths."""
        target = Path(local_path) if local_path else self.local_path
        if target is None:
            raise ValueError("FailureLedger has no output directory")
        if not self._entries:
            return []
        target.mkdir(parents=True, exist_ok=True)
        written = []
        for index, entry in enumerate(self._entries):
            path = target / f"{index:05d}_{entry.source}.json"
            path.write_text(json.dumps(asdict(entry), sort_keys=True, default=str))
            written.append(path)
        return written
