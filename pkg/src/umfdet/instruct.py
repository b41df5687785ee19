"""Instruction templates and the word-level token pipeline.

The prompt is assembled from four template sections (task, options,
question, response format); the question section carries a {TITLE}
placeholder. Tokenization is lowercase word-level with the reasoning/answer
markers and the [image]/[text] grounding tags kept atomic, so generated
sequences survive a decode back into parseable text.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import ConfigError, DataError, TemplateError

TITLE_PLACEHOLDER = "{TITLE}"

PAD, BOS, EOS, UNK = 0, 1, 2, 3
THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE = 4, 5, 6, 7
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>",
                   "<think>", "</think>", "<answer>", "</answer>")

_OPENING_MARKERS = {"<think>", "<answer>"}
_CLOSING_MARKERS = {"</think>", "</answer>"}
_TOKEN_RE = re.compile(r"</?think>|</?answer>|\[image\]|\[text\]|[\w']+|[^\w\s]")


# ---------------------------------------------------------------------------
# templates


@dataclass(frozen=True)
class InstructionTemplate:
    p_task: str
    p_opt: str
    p_que: str
    p_resp: str


_SECTION_HEADERS = ("[TASK]", "[OPT]", "[QUE]", "[RESP]")


def parse_template(text: str) -> InstructionTemplate:
    """Parse the four-section template format; headers sit alone on a line
    and must appear once each, in order."""
    sections = {}
    current = None
    for raw_line in text.splitlines():
        line = raw_line.strip()
        if line in _SECTION_HEADERS:
            if line in sections:
                raise TemplateError(f"duplicate section header {line}")
            expected = _SECTION_HEADERS[len(sections)]
            if line != expected:
                raise TemplateError(f"expected section {expected}, found {line}")
            current = line
            sections[current] = []
        elif current is None:
            if line:
                raise TemplateError(f"text before first section header: {line!r}")
        else:
            sections[current].append(raw_line)
    missing = [h for h in _SECTION_HEADERS if h not in sections]
    if missing:
        raise TemplateError(f"missing section headers: {missing}")
    task, opt, que, resp = ("\n".join(sections[h]).strip() for h in _SECTION_HEADERS)
    return InstructionTemplate(p_task=task, p_opt=opt, p_que=que, p_resp=resp)


def load_template(path) -> InstructionTemplate:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_template(fh.read())


def default_template() -> InstructionTemplate:
    ref = resources.files("umfdet").joinpath("templates/detect.txt")
    with ref.open("r", encoding="utf-8") as fh:
        return parse_template(fh.read())


def render_prompt(template: InstructionTemplate, title: str) -> str:
    """Join the sections with single newlines, title substituted into the
    question section."""
    if not title or not title.strip():
        raise DataError("cannot render a prompt for an empty title")
    if TITLE_PLACEHOLDER not in template.p_que:
        raise TemplateError(f"question section lacks the {TITLE_PLACEHOLDER} placeholder")
    que = template.p_que.replace(TITLE_PLACEHOLDER, title.strip())
    return "\n".join([template.p_task, template.p_opt, que, template.p_resp])


# ---------------------------------------------------------------------------
# tokenization


def split_tokens(text: str) -> list:
    """Lowercase word-level split; structural markers and grounding tags stay
    atomic, punctuation becomes single-character tokens."""
    return [t.lower() for t in _TOKEN_RE.findall(text)]


class Vocabulary:
    """Frozen token<->id maps with fixed reserved ids 0-7."""

    def __init__(self, tokens):
        if tuple(tokens[:len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ConfigError(f"vocabulary must start with the reserved tokens {RESERVED_TOKENS}")
        self.id_to_token = list(tokens)
        self.token_to_id = {}
        for i, tok in enumerate(self.id_to_token):
            if tok in self.token_to_id:
                raise ConfigError(f"duplicate vocabulary token {tok!r}")
            self.token_to_id[tok] = i

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    @classmethod
    def build(cls, texts, min_count: int = 2, max_size: int = 8192) -> "Vocabulary":
        """Count word tokens over the corpus, keep those seen at least
        min_count times, rank by frequency then lexicographically, cap the
        total size."""
        if min_count < 1:
            raise ConfigError(f"min_count must be >= 1, got {min_count}")
        if max_size < len(RESERVED_TOKENS) + 1:
            raise ConfigError(f"max_size {max_size} leaves no room beyond reserved tokens")
        counts = Counter()
        for text in texts:
            for tok in split_tokens(text):
                if tok not in RESERVED_TOKENS:
                    counts[tok] += 1
        kept = [t for t, c in counts.items() if c >= min_count]
        kept.sort(key=lambda t: (-counts[t], t))
        room = max_size - len(RESERVED_TOKENS)
        return cls(list(RESERVED_TOKENS) + kept[:room])

    def encode(self, text: str, add_bos: bool = False, add_eos: bool = False) -> list:
        ids = [self.token_to_id.get(t, UNK) for t in split_tokens(text)]
        if add_bos:
            ids.insert(0, BOS)
        if add_eos:
            ids.append(EOS)
        return ids

    def decode(self, ids, skip_special: bool = True) -> str:
        """Inverse of encode up to casing and spacing; markers join tightly so
        the result stays parseable by the answer/rationale extractors."""
        out = []
        glue_next = False
        prev = None
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.id_to_token):
                raise DataError(f"token id {i} outside vocabulary of size {len(self)}")
            tok = self.id_to_token[i]
            if skip_special and i in (PAD, BOS, EOS):
                continue
            tight = (tok in _CLOSING_MARKERS
                     or (tok in _OPENING_MARKERS and prev in _CLOSING_MARKERS)
                     or (len(tok) == 1 and not tok.isalnum() and tok != "'"))
            if not out or glue_next or tight:
                out.append(tok)
            else:
                out.append(" " + tok)
            glue_next = tok in _OPENING_MARKERS
            prev = tok
        return "".join(out)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.id_to_token):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise DataError(f"vocab line {lineno} is not token<TAB>id: {line!r}")
                try:
                    idx = int(parts[1])
                except ValueError:
                    raise DataError(f"vocab line {lineno} has non-integer id: {line!r}")
                if idx in tokens:
                    raise DataError(f"vocab line {lineno} repeats id {idx}")
                tokens[idx] = parts[0]
        if sorted(tokens) != list(range(len(tokens))):
            raise DataError("vocab ids must be contiguous from 0")
        return cls([tokens[i] for i in range(len(tokens))])


def embed_text(table, pos_table, ids):
    """Token embedding plus learned positional rows: [T] -> [T, H]."""
    from . import ndtensor as nd

    n = len(ids)
    if n == 0:
        raise DataError("cannot embed an empty token sequence")
    if n > pos_table.values.shape[0]:
        raise DataError(f"sequence length {n} exceeds positional table "
                        f"of {pos_table.values.shape[0]} rows")
    tok = nd.embedding(table, ids)
    pos = nd.embedding(pos_table, np.arange(n))
    return nd.add(tok, pos)
