"""
Corpus files: UTF-8 parallel text, one sentence per line, as `<split>.src` /
`<split>.tgt` pairs with `<split>.src.tags` / `<split>.tgt.tags` alongside;
`vocab.json` for the shared vocabulary and `contrastive.jsonl` for
contrastive records.
"""
import json
import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

from pydantic import ValidationError

from app.core.exceptions import DataError
from app.data.vocab import Vocabulary
from app.schemas.data import ContrastiveRecord, SentencePair, TokenTag

logger = logging.getLogger(__name__)

VOCAB_FILE = "vocab.json"
CONTRASTIVE_FILE = "contrastive.jsonl"


def read_lines(path: Union[str, Path]) -> List[str]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    text = path.read_text(encoding="utf-8")
    return text.splitlines()


def write_lines(path: Union[str, Path], lines: Iterable[str]) -> None:
    lines = list(lines)
    Path(path).write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")


def write_split(out_dir: Path, name: str, pairs: Sequence[SentencePair]) -> None:
    write_lines(out_dir / f"{name}.src", (" ".join(p.src) for p in pairs))
    write_lines(out_dir / f"{name}.tgt", (" ".join(p.tgt) for p in pairs))
    write_lines(out_dir / f"{name}.src.tags", (" ".join(t.value for t in p.src_tags) for p in pairs))
    write_lines(out_dir / f"{name}.tgt.tags", (" ".join(t.value for t in p.tgt_tags) for p in pairs))


def read_split(corpus_dir: Union[str, Path], name: str) -> List[SentencePair]:
    """Read one split; missing tag files tag every token as content."""
    corpus_dir = Path(corpus_dir)
    sources = read_lines(corpus_dir / f"{name}.src")
    targets = read_lines(corpus_dir / f"{name}.tgt")
    if len(sources) != len(targets):
        raise DataError(f"{name}: {len(sources)} source lines but {len(targets)} target lines")

    def tags(suffix: str, lines: List[str]) -> List[List[TokenTag]]:
        path = corpus_dir / f"{name}.{suffix}.tags"
        if not path.exists():
            return [[TokenTag.CONTENT] * len(line.split()) for line in lines]
        return [[TokenTag(t) for t in line.split()] for line in read_lines(path)]

    pairs = []
    for src, tgt, src_tags, tgt_tags in zip(sources, targets, tags("src", sources), tags("tgt", targets)):
        try:
            pairs.append(SentencePair(src=src.split(), tgt=tgt.split(), src_tags=src_tags, tgt_tags=tgt_tags))
        except ValidationError as exc:
            raise DataError(f"{name}: malformed sentence pair: {exc}") from None
    return pairs


def write_contrastive(path: Union[str, Path], records: Sequence[ContrastiveRecord]) -> None:
    write_lines(path, (record.model_dump_json() for record in records))


def read_contrastive(path: Union[str, Path]) -> List[ContrastiveRecord]:
    records = []
    for number, line in enumerate(read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            records.append(ContrastiveRecord.model_validate_json(line))
        except ValidationError as exc:
            raise DataError(f"{path}:{number}: invalid contrastive record: {exc}") from None
    return records


def load_vocab(corpus_dir: Union[str, Path], override: Optional[str] = None) -> Vocabulary:
    return Vocabulary.load(override or Path(corpus_dir) / VOCAB_FILE)


def corpus_manifest(corpus_dir: Union[str, Path]) -> dict:
    path = Path(corpus_dir) / "corpus.json"
    if not path.exists():
        return {}
    return json.loads(path.read_text(encoding="utf-8"))
