import json
import os
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Set, Union

from .audio_dsp import MelConfig, SerValue, load_mel, save_mel
from .triplet_forge import Strategy, TripletSample

MEL_KINDS = ("target", "speech", "env")
REQUIRED_FIELDS = ("id", *MEL_KINDS, "transcript", "ser", "strategy", "frames")


class ManifestError(ValueError):
    """A manifest record is malformed, duplicated or points at missing files."""


class Manifest:
    def __init__(self, manifest_path: Optional[str] = None, check_files: bool = True):
        """Line-delimited JSON records, one per triplet, paths relative to the manifest."""
        self.records: List[Dict] = []
        self._ids: Set[str] = set()
        self.manifest_path = manifest_path
        self.check_files = check_files

        if manifest_path and os.path.exists(manifest_path):
            self.load()

    @property
    def root(self) -> Path:
        return Path(self.manifest_path).parent if self.manifest_path else Path(".")

    @property
    def ids(self) -> List[str]:
        return [record["id"] for record in self.records]

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._ids

    def add(self, record: Dict) -> None:
        """Add a record; ids must stay unique."""
        missing = [name for name in REQUIRED_FIELDS if name not in record]
        if missing:
            raise ManifestError(
                f"Record {record.get('id', '?')} is missing fields: {', '.join(missing)}"
            )
        if record["id"] in self._ids:
            raise ManifestError(f"Duplicate record id: {record['id']}")
        self._ids.add(record["id"])
        self.records.append(record)

    def save(self) -> None:
        """Write the records to disk in insertion order."""
        if self.manifest_path:
            Path(self.manifest_path).parent.mkdir(parents=True, exist_ok=True)
            with open(self.manifest_path, "w", encoding="utf-8") as f:
                for record in self.records:
                    f.write(json.dumps(record, sort_keys=True) + "\n")

    def load(self) -> None:
        """Load the records from disk, validating each line."""
        self.records = []
        self._ids = set()
        with open(self.manifest_path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ManifestError(
                        f"{self.manifest_path}:{line_no}: malformed record ({e.msg})"
                    ) from e
                if not isinstance(record, dict):
                    raise ManifestError(f"{self.manifest_path}:{line_no}: record is not an object")
                self.add(record)
                if self.check_files:
                    self._check_files(record)

    def _check_files(self, record: Dict) -> None:
        for kind in MEL_KINDS:
            if not (self.root / record[kind]).exists():
                raise ManifestError(
                    f"Record {record['id']}: {kind} file not found: {record[kind]}"
                )

    def load_triplet(self, record: Dict, cfg: MelConfig) -> TripletSample:
        mels = {}
        for kind in MEL_KINDS:
            mel = load_mel(self.root / record[kind], cfg)
            mels[kind] = mel
        return TripletSample(
            target_mel=mels["target"],
            speech_mel=mels["speech"],
            env_mel=mels["env"],
            transcript=record["transcript"],
            ser=SerValue(record["ser"]),
            strategy=Strategy(record["strategy"]),
            sample_id=record["id"],
        )

    def triplets(self, cfg: MelConfig) -> List[TripletSample]:
        return [self.load_triplet(record, cfg) for record in self.records]

    @property
    def size(self) -> int:
        """Return the number of records in the manifest."""
        return len(self.records)


def write_manifest(samples: Iterable[TripletSample], path: Union[str, Path]) -> Manifest:
    """Dump every triplet's mels next to the manifest and write the records.

    Samples without an id are numbered by position.
    """
    path = Path(path)
    manifest = Manifest(check_files=False)
    manifest.manifest_path = str(path)
    mel_dir = path.parent / "mels"
    for index, sample in enumerate(samples):
        sample_id = sample.sample_id or f"{index:05d}"
        if sample_id in manifest:
            raise ManifestError(f"Duplicate record id: {sample_id}")
        record = {"id": sample_id}
        for kind in MEL_KINDS:
            rel = Path("mels") / f"{sample_id}_{kind}.mel"
            save_mel(mel_dir / rel.name, getattr(sample, f"{kind}_mel"))
            record[kind] = rel.as_posix()
        record.update(
            transcript=sample.transcript,
            ser=sample.ser.value,
            strategy=sample.strategy.value,
            frames=sample.n_frames,
        )
        manifest.add(record)
    manifest.save()
    return manifest


def read_manifest(path: Union[str, Path]) -> Manifest:
    if not Path(path).exists():
        raise ManifestError(f"Manifest not found: {path}")
    return Manifest(manifest_path=str(path))
