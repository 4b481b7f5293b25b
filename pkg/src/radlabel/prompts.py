"""Prompt rendering and few-shot example selection."""
from __future__ import annotations

import json
import random
import re
from collections.abc import Sequence
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Literal

from radlabel.schema import (
    Dataset,
    FindingLabel,
    FindingSchema,
    LabelVector,
    Report,
    content_digest,
)

PromptMode = Literal["zero_shot", "few_shot"]
WireMode = Literal["chat", "completion"]

_PLACEHOLDER = re.compile(r"\{\{\s*([a-z_]+)\s*\}\}")
_SECTION = re.compile(r"^\[(instructions|query)\]\s*$", re.MULTILINE)

# Findings with more positives than this are covered with the exact solver.
EXACT_COVER_MAX_FINDINGS = 16


class TemplateError(ValueError):
    pass


class UncoverableFindingError(ValueError):
    def __init__(self, findings: Sequence[str]):
        self.findings = list(findings)
        super().__init__(f"uncoverable finding(s), no positive example in pool: {', '.join(self.findings)}")


@dataclass(frozen=True)
class PromptTemplate:
    """Instructions (system side) plus the per-report query layout.

    ``task_instructions`` must contain ``{{findings_json_template}}`` and may
    contain ``{{examples}}``; ``query_format`` must contain ``{{report_text}}``.
    """

    task_instructions: str
    query_format: str
    mode: PromptMode = "zero_shot"

    def __post_init__(self) -> None:
        if "findings_json_template" not in _placeholders(self.task_instructions):
            raise TemplateError("instructions lack {{findings_json_template}}")
        if "report_text" not in _placeholders(self.query_format):
            raise TemplateError("query lacks {{report_text}}")

    def with_mode(self, mode: PromptMode) -> PromptTemplate:
        return PromptTemplate(self.task_instructions, self.query_format, mode)

    def to_dict(self) -> dict[str, str]:
        return {"instructions": self.task_instructions, "query": self.query_format, "mode": self.mode}


def _placeholders(text: str) -> set[str]:
    return set(_PLACEHOLDER.findall(text))


def parse_template(text: str, mode: PromptMode = "zero_shot") -> PromptTemplate:
    parts = _SECTION.split(text)
    sections: dict[str, str] = {}
    for name, body in zip(parts[1::2], parts[2::2]):
        sections[name] = body.strip("\n")
    if "instructions" not in sections or "query" not in sections:
        raise TemplateError("template needs [instructions] and [query] sections")
    return PromptTemplate(sections["instructions"], sections["query"], mode)


def load_template(path: str | Path | None = None, mode: PromptMode = "zero_shot") -> PromptTemplate:
    if path is None:
        text = resources.files("radlabel.data").joinpath("template_default.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return parse_template(text, mode)


def answer_template(schema: FindingSchema) -> str:
    """JSON skeleton listing every finding, in schema order, with its choices."""
    choices = "/".join(c.display for c in schema.classes)
    return json.dumps({schema.display_name(f): choices for f in schema.findings}, indent=2)


def serialize_answer(labels: LabelVector, schema: FindingSchema) -> str:
    """Fill the answer template with concrete labels."""
    return json.dumps({schema.display_name(f): labels[f].display for f in schema.findings}, indent=2)


def _substitute(text: str, values: dict[str, str]) -> str:
    def repl(match: re.Match[str]) -> str:
        key = match.group(1)
        if key not in values:
            raise TemplateError(f"unresolved placeholder {{{{{key}}}}}")
        return values[key]

    # single pass: substituted text (report bodies) is never re-scanned
    return _PLACEHOLDER.sub(repl, text)


@dataclass(frozen=True)
class FewShotSet:
    examples: tuple[tuple[Report, LabelVector], ...]

    @property
    def covered(self) -> frozenset[str]:
        return frozenset(f for _, labels in self.examples for f, v in labels.items() if v is FindingLabel.YES)

    @property
    def ids(self) -> list[str]:
        return [r.id for r, _ in self.examples]

    def __len__(self) -> int:
        return len(self.examples)

    def to_dict(self) -> dict:
        return {
            "example_ids": self.ids,
            "covered": sorted(self.covered),
            "examples": [{"id": r.id, "text": r.text, "labels": lv.to_strings()} for r, lv in self.examples],
        }

    @classmethod
    def from_dict(cls, data: dict, schema: FindingSchema) -> FewShotSet:
        return cls(
            tuple(
                (Report(e["id"], e["text"]), LabelVector.from_strings(schema, e["labels"]))
                for e in data["examples"]
            )
        )


@dataclass(frozen=True)
class PromptBundle:
    chat_messages: tuple[tuple[str, str], ...] | None
    raw_text: str | None
    token_estimate: int
    template_hash: str
    metadata: dict[str, str] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self) -> None:
        if (self.chat_messages is None) == (self.raw_text is None):
            raise ValueError("exactly one of chat_messages / raw_text must be set")

    @property
    def wire_mode(self) -> WireMode:
        return "chat" if self.chat_messages is not None else "completion"

    @property
    def report_id(self) -> str | None:
        return self.metadata.get("report_id")


def _estimate_tokens(texts: Sequence[str]) -> int:
    # ~4 characters per token for English clinical text
    return sum(len(t) for t in texts) // 4 + 1


def template_digest(template: PromptTemplate, schema: FindingSchema, shots: FewShotSet | None = None) -> str:
    return content_digest(
        {
            "template": template.to_dict(),
            "schema": schema.to_dict(),
            "shots": shots.to_dict() if shots is not None else None,
        }
    )


def _render(
    template: PromptTemplate,
    schema: FindingSchema,
    shots: FewShotSet | None,
    report: Report,
    mode: WireMode,
) -> PromptBundle:
    if not report.text.strip():
        raise TemplateError(f"report {report.id!r} has empty text")
    skeleton = answer_template(schema)
    digest = template_digest(template, schema, shots)
    examples = shots.examples if shots is not None else ()

    def query(text: str) -> str:
        return _substitute(template.query_format, {"report_text": text})

    if mode == "chat":
        system = _substitute(
            template.task_instructions, {"findings_json_template": skeleton, "examples": ""}
        ).strip()
        messages: list[tuple[str, str]] = [("system", system)]
        for ex_report, ex_labels in examples:
            messages.append(("user", query(ex_report.text)))
            messages.append(("assistant", serialize_answer(ex_labels, schema)))
        messages.append(("user", query(report.text)))
        return PromptBundle(
            chat_messages=tuple(messages),
            raw_text=None,
            token_estimate=_estimate_tokens([m[1] for m in messages]),
            template_hash=digest,
            metadata={"report_id": report.id},
        )
    if mode == "completion":
        block = "".join(
            f"{query(r.text)}\n\nAnswer:\n{serialize_answer(lv, schema)}\n\n" for r, lv in examples
        )
        inline = "examples" in _placeholders(template.task_instructions)
        head = _substitute(
            template.task_instructions,
            {"findings_json_template": skeleton, "examples": ("\n" + block) if (inline and block) else ""},
        ).strip()
        body = "" if inline else block
        text = f"{head}\n\n{body}{query(report.text)}\n\nAnswer:\n"
        return PromptBundle(
            chat_messages=None,
            raw_text=text,
            token_estimate=_estimate_tokens([text]),
            template_hash=digest,
            metadata={"report_id": report.id},
        )
    raise TemplateError(f"unknown wire mode {mode!r}")


def render_zero_shot(
    template: PromptTemplate, schema: FindingSchema, report: Report, mode: WireMode = "chat"
) -> PromptBundle:
    if template.mode != "zero_shot":
        raise TemplateError("render_zero_shot needs a zero_shot template")
    return _render(template, schema, None, report, mode)


def render_few_shot(
    template: PromptTemplate,
    schema: FindingSchema,
    shots: FewShotSet,
    report: Report,
    mode: WireMode = "chat",
) -> PromptBundle:
    if template.mode != "few_shot":
        raise TemplateError("render_few_shot needs a few_shot template")
    if not shots.examples:
        raise TemplateError("few-shot rendering needs at least one example")
    return _render(template, schema, shots, report, mode)


def render_examples_block(schema: FindingSchema, shots: FewShotSet, template: PromptTemplate) -> str:
    """Human-readable example block, as it appears in completion-mode prompts."""
    return "".join(
        f"{_substitute(template.query_format, {'report_text': r.text})}\n\nAnswer:\n{serialize_answer(lv, schema)}\n\n"
        for r, lv in shots.examples
    )


def _positive_masks(pool: Dataset, findings: Sequence[str]) -> list[int]:
    masks = []
    for report in pool.reports:
        gold = pool.gold_vector(report.id)
        mask = 0
        for bit, f in enumerate(findings):
            if gold[f] is FindingLabel.YES:
                mask |= 1 << bit
        masks.append(mask)
    return masks


def _min_cover_table(target: int, masks: Sequence[int]) -> dict[int, int]:
    """Minimum number of masks needed to cover every submask of ``target``."""
    useful = sorted({m & target for m in masks if m & target})
    subs = [s for s in _submasks(target)]
    subs.sort(key=lambda s: bin(s).count("1"))
    table = {0: 0}
    for s in subs:
        if s == 0:
            continue
        best = None
        low = s & -s
        # some set must cover the lowest uncovered bit
        for m in useful:
            if m & low:
                cand = table[s & ~m] + 1
                if best is None or cand < best:
                    best = cand
        table[s] = best  # type: ignore[assignment]
    return table


def _submasks(mask: int):
    sub = mask
    while True:
        yield sub
        if sub == 0:
            return
        sub = (sub - 1) & mask


def select_few_shot(
    pool: Dataset,
    schema: FindingSchema | None = None,
    seed: int = 0,
    *,
    require_full_cover: bool = True,
) -> FewShotSet:
    """Randomly draw a smallest set of reports with a positive example for every finding.

    Each draw picks uniformly (under ``seed``) among reports that keep the
    remaining cover minimal. For schemas with more than
    ``EXACT_COVER_MAX_FINDINGS`` coverable findings this degrades to greedy
    max-coverage with random tie-breaking.
    """
    schema = schema or pool.schema
    if pool.gold is None:
        raise ValueError("few-shot pool needs gold labels")
    findings = list(schema.findings)
    masks = _positive_masks(pool, findings)
    union = 0
    for m in masks:
        union |= m
    missing = [f for bit, f in enumerate(findings) if not union >> bit & 1]
    if missing and require_full_cover:
        raise UncoverableFindingError(missing)

    rng = random.Random(seed)
    remaining = union
    chosen: list[int] = []
    exact = bin(union).count("1") <= EXACT_COVER_MAX_FINDINGS
    table = _min_cover_table(union, masks) if exact else None
    while remaining:
        if table is not None:
            need = table[remaining]
            candidates = [
                i for i, m in enumerate(masks)
                if m & remaining and i not in chosen and table[remaining & ~m] == need - 1
            ]
        else:
            best = max(bin(m & remaining).count("1") for m in masks)
            candidates = [i for i, m in enumerate(masks) if bin(m & remaining).count("1") == best]
        pick = rng.choice(candidates)
        chosen.append(pick)
        remaining &= ~masks[pick]

    examples = tuple((pool.reports[i], pool.gold_vector(pool.reports[i].id)) for i in chosen)
    return FewShotSet(examples)
