"""Run-directory I/O: CSV logs with embedded config hashes, and the
append-only run ledger that makes re-running a completed (config, seed)
a no-op unless forced.

All CSVs are UTF-8 with a header row, ``.`` decimals, and repr-formatted
floats (shortest round-trip), so identical runs produce identical bytes.
Lines starting with ``#`` carry metadata (config hash, lineage, sweep grid)
and are not data rows.
"""

from __future__ import annotations

import json
import time
from pathlib import Path
from typing import IO, Sequence

CODE_VERSION = "0.1.0"

TRAIN_LOG_HEADER = ("step", "iteration", "mean_return", "median_return",
                    "success_rate", "policy_loss", "value_loss", "entropy",
                    "grad_norm", "wall_ms")
EVAL_LOG_HEADER = ("step", "iteration", "mean_return", "median_return",
                   "success_rate", "mean_length")


def fmt(value: object) -> str:
    """Deterministic cell formatting: ints verbatim, floats via repr."""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return "nan"
    return str(value)


class CsvLogger:
    """Streaming CSV writer with metadata comment lines."""

    def __init__(self, path: str | Path, header: Sequence[str],
                 comments: Sequence[str] = ()) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh: IO[str] = open(self.path, "w", encoding="utf-8", newline="\n")
        for comment in comments:
            self._fh.write(f"# {comment}\n")
        self._header = tuple(header)
        self._fh.write(",".join(self._header) + "\n")
        self._fh.flush()

    def row(self, values: dict[str, object]) -> None:
        cells = [fmt(values.get(col, "nan")) for col in self._header]
        self._fh.write(",".join(cells) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "CsvLogger":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_csv_rows(path: str | Path) -> tuple[list[str], list[list[str]]]:
    """Read a CSV written by CsvLogger; comment lines are skipped."""
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines()
             if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


# ---------------------------------------------------------------------------
# Run ledger
# ---------------------------------------------------------------------------

def ledger_path(run_dir: str | Path) -> Path:
    return Path(run_dir) / "ledger.json"


def load_ledger(run_dir: str | Path) -> dict:
    path = ledger_path(run_dir)
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    return {"code_version": CODE_VERSION, "config_hash": None,
            "lineage_hash": None, "seeds": {}, "events": []}


def save_ledger(run_dir: str | Path, ledger: dict) -> None:
    path = ledger_path(run_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(ledger, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def seed_status(run_dir: str | Path, phase: str, seed: int) -> str | None:
    ledger = load_ledger(run_dir)
    entry = ledger["seeds"].get(f"{phase}:{seed}")
    return entry["status"] if entry else None


def record_seed(run_dir: str | Path, phase: str, seed: int, status: str,
                config_hash: str, lineage: str,
                artifacts: Sequence[str] = ()) -> None:
    ledger = load_ledger(run_dir)
    ledger["config_hash"] = config_hash
    ledger["lineage_hash"] = lineage
    ledger["code_version"] = CODE_VERSION
    ledger["seeds"][f"{phase}:{seed}"] = {
        "status": status,
        "artifacts": sorted(str(a) for a in artifacts),
    }
    ledger["events"].append({"phase": phase, "seed": seed, "status": status,
                             "time": time.strftime("%Y-%m-%dT%H:%M:%S")})
    save_ledger(run_dir, ledger)
