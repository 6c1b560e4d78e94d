"""Reading and writing workflow batch documents.

JSON is the canonical on-disk form; XML is accepted as an alternate input
syntax mapping onto the same schema.  Every document must carry
schema = "pubflow/1".

serialize_workflow emits a canonical form: fixed key order, tasks and
rules sorted by id, dependency and capability lists sorted.  Parsing a
canonical document and serializing the result reproduces it byte for byte.
Unknown fields are not dropped: they are preserved in batch metadata
(top-level key as-is, task-level as "task:<id>:<field>").
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from typing import Mapping, Optional

from .errors import SchemaError, WorkflowSyntaxError
from .model import GuardPredicate, KernelSpec, Task, UnfoldRule, WorkflowBatch

SCHEMA_MARK = "pubflow/1"

_TASK_KEYS = {"id", "kernel", "deps", "required_caps", "validator",
              "max_attempts", "unfold_rule"}
_KERNEL_KEYS = {"name", "params", "inputs", "outputs", "duration"}


# ---------------------------------------------------------------- parsing

def parse_workflow(data: bytes | str, format: str = "json") -> WorkflowBatch:
    """Decode a workflow document.

    Raises WorkflowSyntaxError when the document cannot be decoded at all
    and SchemaError (naming the offending element) when it decodes but
    violates the schema.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    if format == "json":
        return _parse_json(data)
    if format == "xml":
        return _parse_xml(data)
    raise SchemaError(f"unknown workflow format {format!r}")


def _parse_json(text: str) -> WorkflowBatch:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WorkflowSyntaxError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("document root must be an object")
    return _build_batch(doc)


def _build_batch(doc: Mapping) -> WorkflowBatch:
    if doc.get("schema") != SCHEMA_MARK:
        raise SchemaError(
            f"document must declare schema {SCHEMA_MARK!r}, "
            f"got {doc.get('schema')!r}")
    batch_id = doc.get("batch_id")
    if not isinstance(batch_id, str) or not batch_id:
        raise SchemaError("batch_id missing or not a string")

    metadata: dict[str, object] = {}
    raw_meta = doc.get("metadata", {})
    if not isinstance(raw_meta, dict):
        raise SchemaError("metadata must be an object")
    metadata.update(raw_meta)
    for key in doc:
        if key not in {"schema", "batch_id", "metadata", "tasks", "rules"}:
            metadata[key] = doc[key]

    raw_tasks = doc.get("tasks")
    if not isinstance(raw_tasks, list):
        raise SchemaError("tasks missing or not a list")
    tasks: dict[str, Task] = {}
    for entry in raw_tasks:
        task = _task_from_obj(entry, metadata)
        if task.id in tasks:
            raise SchemaError(f"duplicate task id {task.id!r}")
        tasks[task.id] = task

    rules: dict[str, UnfoldRule] = {}
    for entry in doc.get("rules", []):
        rule = _rule_from_obj(entry)
        if rule.rule_id in rules:
            raise SchemaError(f"duplicate rule id {rule.rule_id!r}")
        rules[rule.rule_id] = rule

    for task in tasks.values():
        for dep in sorted(task.deps):
            if dep not in tasks:
                raise SchemaError(
                    f"task {task.id!r} depends on unknown id {dep!r}")
        if task.unfold_rule is not None and task.unfold_rule not in rules:
            raise SchemaError(
                f"task {task.id!r} references unknown rule "
                f"{task.unfold_rule!r}")

    return WorkflowBatch(batch_id=batch_id, tasks=tasks, rules=rules,
                         metadata=metadata)


def _task_from_obj(obj: object, metadata: Optional[dict] = None) -> Task:
    if not isinstance(obj, dict):
        raise SchemaError("task entry must be an object")
    tid = obj.get("id")
    if not isinstance(tid, str) or not tid:
        raise SchemaError("task missing id")
    kernel_obj = obj.get("kernel")
    if not isinstance(kernel_obj, dict) or "name" not in kernel_obj:
        raise SchemaError(f"task {tid!r} missing kernel name")
    kernel = KernelSpec(
        name=str(kernel_obj["name"]),
        params=dict(kernel_obj.get("params", {})),
        inputs=tuple(kernel_obj.get("inputs", [])),
        outputs=tuple(kernel_obj.get("outputs", [])),
        declared_duration=float(kernel_obj.get("duration", 1.0)),
    )
    deps = obj.get("deps", [])
    caps = obj.get("required_caps", [])
    if not isinstance(deps, list) or not isinstance(caps, list):
        raise SchemaError(f"task {tid!r}: deps/required_caps must be lists")
    if metadata is not None:
        for key in obj:
            if key not in _TASK_KEYS:
                metadata[f"task:{tid}:{key}"] = obj[key]
    try:
        return Task(
            id=tid,
            kernel=kernel,
            deps=frozenset(deps),
            required_caps=frozenset(caps),
            validator=obj.get("validator"),
            max_attempts=int(obj.get("max_attempts", 3)),
            unfold_rule=obj.get("unfold_rule"),
        )
    except ValueError as exc:
        raise SchemaError(f"task {tid!r}: {exc}") from exc


def _rule_from_obj(obj: object) -> UnfoldRule:
    if not isinstance(obj, dict):
        raise SchemaError("rule entry must be an object")
    rid = obj.get("id")
    if not isinstance(rid, str) or not rid:
        raise SchemaError("rule missing id")
    if "head" not in obj:
        raise SchemaError(f"rule {rid!r} missing head")
    guard_obj = obj.get("guard", {})
    if not isinstance(guard_obj, dict):
        raise SchemaError(f"rule {rid!r}: guard must be an object")
    guard = GuardPredicate(
        min_workers=int(guard_obj.get("min_workers", 0)),
        required_cap=guard_obj.get("required_cap"),
        dataset_id=guard_obj.get("dataset_id"),
        min_dataset_size=(
            None if guard_obj.get("min_dataset_size") is None
            else int(guard_obj["min_dataset_size"])),
    )
    body = tuple(_task_from_obj(entry) for entry in obj.get("body", []))
    try:
        return UnfoldRule(
            rule_id=rid,
            head=str(obj["head"]),
            body=body,
            entries=frozenset(obj.get("entries", [])),
            exits=frozenset(obj.get("exits", [])),
            guard=guard,
        )
    except ValueError as exc:
        raise SchemaError(f"rule {rid!r}: {exc}") from exc


# ----------------------------------------------------------------- XML

def _parse_xml(text: str) -> WorkflowBatch:
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise WorkflowSyntaxError(f"invalid XML: {exc}") from exc
    if root.tag != "workflow":
        raise SchemaError(f"root element must be <workflow>, got <{root.tag}>")

    doc: dict[str, object] = {
        "schema": root.get("schema"),
        "batch_id": root.get("batch_id"),
        "metadata": {},
        "tasks": [],
        "rules": [],
    }
    for child in root:
        if child.tag == "meta":
            key = child.get("key")
            if key is None:
                raise SchemaError("<meta> element missing key attribute")
            doc["metadata"][key] = _json_text(child, "meta")
        elif child.tag == "task":
            doc["tasks"].append(_xml_task(child))
        elif child.tag == "rule":
            doc["rules"].append(_xml_rule(child))
        else:
            raise SchemaError(f"unexpected element <{child.tag}> in <workflow>")
    return _build_batch(doc)


def _json_text(elem: ET.Element, what: str) -> object:
    raw = elem.text if elem.text is not None else "null"
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"<{what}> value is not valid JSON: {raw!r}") from exc


def _xml_task(elem: ET.Element) -> dict:
    obj: dict[str, object] = {"id": elem.get("id")}
    if elem.get("validator") is not None:
        obj["validator"] = elem.get("validator")
    if elem.get("max-attempts") is not None:
        obj["max_attempts"] = int(elem.get("max-attempts"))
    if elem.get("unfold-rule") is not None:
        obj["unfold_rule"] = elem.get("unfold-rule")
    deps, caps = [], []
    for child in elem:
        if child.tag == "kernel":
            params = {}
            inputs, outputs = [], []
            for k in child:
                if k.tag == "param":
                    key = k.get("key")
                    if key is None:
                        raise SchemaError("<param> element missing key")
                    params[key] = _json_text(k, "param")
                elif k.tag == "input":
                    inputs.append(k.get("ref"))
                elif k.tag == "output":
                    outputs.append(k.get("ref"))
                else:
                    raise SchemaError(f"unexpected element <{k.tag}> in <kernel>")
            obj["kernel"] = {
                "name": child.get("name"),
                "params": params,
                "inputs": inputs,
                "outputs": outputs,
                "duration": float(child.get("duration", "1.0")),
            }
        elif child.tag == "dep":
            ref = child.get("ref")
            if ref is None:
                raise SchemaError("<dep> element missing ref")
            deps.append(ref)
        elif child.tag == "cap":
            tag = child.get("tag")
            if tag is None:
                raise SchemaError("<cap> element missing tag")
            caps.append(tag)
        else:
            raise SchemaError(f"unexpected element <{child.tag}> in <task>")
    obj["deps"] = deps
    obj["required_caps"] = caps
    return obj


def _xml_rule(elem: ET.Element) -> dict:
    obj: dict[str, object] = {
        "id": elem.get("id"),
        "head": elem.get("head"),
        "entries": [],
        "exits": [],
        "body": [],
    }
    for child in elem:
        if child.tag == "guard":
            guard: dict[str, object] = {}
            if child.get("min-workers") is not None:
                guard["min_workers"] = int(child.get("min-workers"))
            if child.get("required-cap") is not None:
                guard["required_cap"] = child.get("required-cap")
            if child.get("dataset-id") is not None:
                guard["dataset_id"] = child.get("dataset-id")
            if child.get("min-dataset-size") is not None:
                guard["min_dataset_size"] = int(child.get("min-dataset-size"))
            obj["guard"] = guard
        elif child.tag == "entry":
            obj["entries"].append(child.get("ref"))
        elif child.tag == "exit":
            obj["exits"].append(child.get("ref"))
        elif child.tag == "body":
            obj["body"] = [_xml_task(t) for t in child if t.tag == "task"]
        else:
            raise SchemaError(f"unexpected element <{child.tag}> in <rule>")
    return obj


# ------------------------------------------------------------- serializing

def task_to_obj(task: Task) -> dict:
    """Canonical JSON object for one task (also the bus payload form)."""
    return {
        "id": task.id,
        "kernel": {
            "name": task.kernel.name,
            "params": {k: task.kernel.params[k]
                       for k in sorted(task.kernel.params)},
            "inputs": list(task.kernel.inputs),
            "outputs": list(task.kernel.outputs),
            "duration": task.kernel.declared_duration,
        },
        "deps": sorted(task.deps),
        "required_caps": sorted(task.required_caps),
        "validator": task.validator,
        "max_attempts": task.max_attempts,
        "unfold_rule": task.unfold_rule,
    }


def task_from_obj(obj: Mapping) -> Task:
    """Inverse of task_to_obj; used when decoding bus payloads."""
    return _task_from_obj(dict(obj))


def _rule_to_obj(rule: UnfoldRule) -> dict:
    return {
        "id": rule.rule_id,
        "head": rule.head,
        "guard": {
            "min_workers": rule.guard.min_workers,
            "required_cap": rule.guard.required_cap,
            "dataset_id": rule.guard.dataset_id,
            "min_dataset_size": rule.guard.min_dataset_size,
        },
        "entries": sorted(rule.entries),
        "exits": sorted(rule.exits),
        "body": [task_to_obj(t) for t in rule.body],
    }


def serialize_workflow(batch: WorkflowBatch) -> str:
    """Canonical JSON text for a batch (stable byte-for-byte)."""
    doc = {
        "schema": SCHEMA_MARK,
        "batch_id": batch.batch_id,
        "metadata": {k: batch.metadata[k] for k in sorted(batch.metadata)},
        "tasks": [task_to_obj(batch.tasks[tid]) for tid in sorted(batch.tasks)],
        "rules": [_rule_to_obj(batch.rules[rid]) for rid in sorted(batch.rules)],
    }
    return json.dumps(doc, indent=2) + "\n"
