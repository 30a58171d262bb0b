"""
Synthetic tasks standing in for the classification and generation benchmarks.

Every task is a list of (prompt, answer) pairs in the SFT layout::

    <support tag><instruction> <payload>\\nAnswer: <answer><EOS>

Classification answers are label words; generation answers are a string
transformation of the payload. Generation is a pure function of the task
spec and the seed.
"""

import json
import logging
import os
import string
from dataclasses import dataclass, field

from .errors import ContractViolation, UnknownRuleError
from .streams import substream

logger = logging.getLogger(__name__)

ANSWER_CUE = "\nAnswer: "
SPLITS = ("train", "validation", "test")
CLASSIFICATION = "classification"
GENERATION = "generation"
SENTINELS = "#$%&@^~|"
SUITE_INDEX = "suite.json"

VOWELS = set("aeiou")
LETTERS = string.ascii_lowercase
SYMBOLS = "!?*+-=<>"


@dataclass(frozen=True)
class Example:
    prompt: str
    answer: str


@dataclass
class TaskDataset:
    task_id: str
    kind: str
    examples: tuple
    splits: dict
    support_tag: str = ""
    support_disjoint: bool = False
    labels: tuple = ()

    def __post_init__(self):
        self.examples = tuple(self.examples)
        self.splits = {name: tuple(self.splits.get(name, ())) for name in SPLITS}
        seen = set()
        for name in SPLITS:
            idx = set(self.splits[name])
            if idx & seen:
                raise ContractViolation("splits of {} overlap".format(self.task_id))
            seen |= idx
        if seen != set(range(len(self.examples))):
            raise ContractViolation("splits of {} do not cover every example".format(self.task_id))
        owner = {}
        for name in SPLITS:
            for i in self.splits[name]:
                prompt = self.examples[i].prompt
                if owner.setdefault(prompt, name) != name:
                    raise ContractViolation("prompt appears in two splits of {}".format(self.task_id))
        if self.support_disjoint:
            if not self.support_tag:
                raise ContractViolation("support-disjoint task {} needs a support tag".format(self.task_id))
            if any(not ex.prompt.startswith(self.support_tag) for ex in self.examples):
                raise ContractViolation("prompt without support tag in {}".format(self.task_id))

    @property
    def metric(self):
        return "accuracy" if self.kind == CLASSIFICATION else "rouge1"

    def split(self, name):
        return [self.examples[i] for i in self.splits[name]]

    def prompts(self, name):
        return [ex.prompt for ex in self.split(name)]

    def records(self):
        for name in SPLITS:
            for ex in self.split(name):
                yield {"task": self.task_id, "split": name, "prompt": ex.prompt, "answer": ex.answer}


@dataclass(frozen=True)
class TaskSpec:
    """Generator parameters of one task: a rule (or transformation) and sizes."""

    kind: str
    rule: str
    n_train: int = 200
    n_validation: int = None
    n_test: int = None
    support_tag: str = ""
    instruction: str = None
    task_id: str = None

    @property
    def sizes(self):
        n_val = self.n_train // 2 if self.n_validation is None else self.n_validation
        n_test = self.n_train // 2 if self.n_test is None else self.n_test
        return self.n_train, n_val, n_test

    @property
    def name(self):
        return self.task_id or self.rule


@dataclass(frozen=True)
class TaskFamily:
    spec: TaskSpec
    seed: int

    def generate(self):
        if self.spec.kind == CLASSIFICATION:
            return make_classification_task(self.spec, self.seed)
        if self.spec.kind == GENERATION:
            return make_generation_task(self.spec, self.seed)
        raise UnknownRuleError("unknown task kind: {}".format(self.spec.kind))


# --------------------------------------------------------------------------- #
# checkers (used for labelling and as independent references in tests)
# --------------------------------------------------------------------------- #

def brackets_balanced(text):
    pairs = {")": "(", "]": "["}
    stack = []
    for ch in text:
        if ch in "([":
            stack.append(ch)
        elif ch in pairs:
            if not stack or stack.pop() != pairs[ch]:
                return False
    return not stack


def _char_class(ch):
    if ch.isdigit():
        return "digit"
    if ch.isalpha():
        return "letter"
    return "symbol"


def _compare(payload):
    a, b = (int(part) for part in payload.split())
    return "greater" if a > b else "less" if a < b else "equal"


@dataclass(frozen=True)
class Rule:
    name: str
    instruction: str
    labels: tuple
    label_of: object
    draw: object = None


def _letters(rng, lo, hi, alphabet=LETTERS):
    n = int(rng.integers(lo, hi + 1))
    return "".join(alphabet[int(i)] for i in rng.integers(0, len(alphabet), size=n))


def _draw_parity(rng, label):
    digits = "".join(str(int(d)) for d in rng.integers(0, 10, size=int(rng.integers(2, 8))))
    last = rng.choice([0, 2, 4, 6, 8] if label == "even" else [1, 3, 5, 7, 9])
    return digits + str(int(last))


def _draw_majority(rng, label):
    n = int(rng.choice([5, 7, 9]))
    n_vowels = int(rng.integers(n // 2 + 1, n + 1))
    if label == "consonants":
        n_vowels = n - n_vowels
    consonants = [c for c in LETTERS if c not in VOWELS]
    chars = [rng.choice(sorted(VOWELS)) for _ in range(n_vowels)]
    chars += [rng.choice(consonants) for _ in range(n - n_vowels)]
    rng.shuffle(chars)
    return "".join(str(c) for c in chars)


def _draw_brackets(rng, label):
    n = int(rng.choice([4, 6, 8, 10]))
    if label == "balanced":
        out, stack = [], []
        while len(out) < n:
            remaining = n - len(out)
            if stack and (remaining == len(stack) or rng.random() < 0.5):
                out.append(")" if stack.pop() == "(" else "]")
            else:
                opener = "(" if rng.random() < 0.5 else "["
                stack.append(opener)
                out.append(opener)
        return "".join(out)
    while True:
        text = "".join(str(rng.choice(list("()[]"))) for _ in range(n))
        if not brackets_balanced(text):
            return text


def _draw_palindrome(rng, label):
    while True:
        text = _letters(rng, 3, 7)
        if label == "yes":
            half = text[:(len(text) + 1) // 2]
            return half + half[:len(text) // 2][::-1]
        if text != text[::-1]:
            return text


def _draw_sorted(rng, label):
    while True:
        text = _letters(rng, 3, 7)
        if label == "sorted":
            return "".join(sorted(text))
        if list(text) != sorted(text):
            return text


def _draw_last_char(rng, label):
    pool = {"letter": LETTERS, "digit": string.digits, "symbol": SYMBOLS}[label]
    body = _letters(rng, 2, 7, LETTERS + string.digits + SYMBOLS)
    return body + pool[int(rng.integers(0, len(pool)))]


def _draw_compare(rng, label):
    a = int(rng.integers(0, 1000))
    if label == "equal":
        return "{} {}".format(a, a)
    while True:
        b = int(rng.integers(0, 1000))
        if a != b and _compare("{} {}".format(a, b)) == label:
            return "{} {}".format(a, b)


CLASSIFICATION_RULES = {rule.name: rule for rule in [
    Rule("parity", "Even or odd?", ("even", "odd"),
         lambda p: "even" if int(p[-1]) % 2 == 0 else "odd", _draw_parity),
    Rule("majority_vowel", "Vowels or consonants?", ("vowels", "consonants"),
         lambda p: "vowels" if sum(c in VOWELS for c in p) * 2 > len(p) else "consonants", _draw_majority),
    Rule("bracket_balance", "Balanced?", ("balanced", "unbalanced"),
         lambda p: "balanced" if brackets_balanced(p) else "unbalanced", _draw_brackets),
    Rule("palindrome", "Palindrome?", ("yes", "no"),
         lambda p: "yes" if p == p[::-1] else "no", _draw_palindrome),
    Rule("sorted_order", "Sorted?", ("sorted", "unsorted"),
         lambda p: "sorted" if list(p) == sorted(p) else "unsorted", _draw_sorted),
    Rule("last_char_class", "Last char kind?", ("letter", "digit", "symbol"),
         lambda p: _char_class(p[-1]), _draw_last_char),
    Rule("compare_numbers", "Compare:", ("greater", "less", "equal"), _compare, _draw_compare),
]}

DEFAULT_CLASSIFICATION = tuple(CLASSIFICATION_RULES)

# rules of the support-disjoint suite all read the same payload distribution
SHARED_ALPHABET = "abcdef"
DISJOINT_INSTRUCTION = "Label:"

DISJOINT_RULES = {rule.name: rule for rule in [
    Rule("length_parity", DISJOINT_INSTRUCTION, ("even", "odd"),
         lambda p: "even" if len(p) % 2 == 0 else "odd"),
    Rule("first_vowel", DISJOINT_INSTRUCTION, ("vowel", "consonant"),
         lambda p: "vowel" if p[0] in VOWELS else "consonant"),
    Rule("ends_high", DISJOINT_INSTRUCTION, ("high", "low"),
         lambda p: "high" if p[-1] in "def" else "low"),
    Rule("first_vs_last", DISJOINT_INSTRUCTION, ("rising", "falling", "level"),
         lambda p: "rising" if p[0] < p[-1] else "falling" if p[0] > p[-1] else "level"),
    Rule("adjacent_repeat", DISJOINT_INSTRUCTION, ("repeat", "distinct"),
         lambda p: "repeat" if any(a == b for a, b in zip(p, p[1:])) else "distinct"),
    Rule("contains_a", DISJOINT_INSTRUCTION, ("yes", "no"),
         lambda p: "yes" if "a" in p else "no"),
    Rule("sorted_letters", DISJOINT_INSTRUCTION, ("sorted", "unsorted"),
         lambda p: "sorted" if list(p) == sorted(p) else "unsorted"),
    Rule("mirror", DISJOINT_INSTRUCTION, ("mirror", "plain"),
         lambda p: "mirror" if p == p[::-1] else "plain"),
]}


def shared_payload(rng):
    return _letters(rng, 3, 6, SHARED_ALPHABET)


def _upper_vowels(text):
    return "".join(c.upper() if c in VOWELS else c for c in text)


TRANSFORMATIONS = {
    "reverse": ("Reverse:", lambda p: p[::-1]),
    "sort": ("Sort:", lambda p: "".join(sorted(p))),
    "duplicate": ("Double:", lambda p: "{} {}".format(p, p)),
    "uppercase_vowels": ("Upper vowels:", _upper_vowels),
}

DEFAULT_GENERATION = tuple(TRANSFORMATIONS)


# --------------------------------------------------------------------------- #
# generators
# --------------------------------------------------------------------------- #

def _prompt(tag, instruction, payload):
    return "{}{} {}{}".format(tag, instruction, payload, ANSWER_CUE)


def _known_instructions():
    found = {rule.instruction for rule in CLASSIFICATION_RULES.values()}
    found.update(instruction for instruction, _ in TRANSFORMATIONS.values())
    found.add(DISJOINT_INSTRUCTION)
    return sorted(found, key=len, reverse=True)


def payload_of(prompt, support_tag="", instruction=None):
    """Recover the payload from a prompt built by this module.

    Instructions may contain spaces, so the instruction is stripped as a
    prefix. Without an explicit ``instruction`` the longest built-in one
    that matches is used.
    """
    body = prompt[len(support_tag):]
    if not body.endswith(ANSWER_CUE):
        raise ContractViolation("prompt does not end with the answer cue")
    body = body[:-len(ANSWER_CUE)]
    candidates = [instruction] if instruction is not None else _known_instructions()
    for candidate in candidates:
        if body.startswith(candidate + " "):
            return body[len(candidate) + 1:]
    raise ContractViolation("prompt does not start with a known instruction")


def _split(task_id, kind, examples, spec, labels=(), disjoint=False):
    n_train, n_val, n_test = spec.sizes
    splits = {
        "train": range(0, n_train),
        "validation": range(n_train, n_train + n_val),
        "test": range(n_train + n_val, n_train + n_val + n_test),
    }
    return TaskDataset(task_id, kind, examples, splits, support_tag=spec.support_tag,
                       support_disjoint=disjoint, labels=tuple(labels))


def _unique_examples(total, make, what):
    examples, seen = [], set()
    attempts = 0
    i = 0
    while len(examples) < total:
        attempts += 1
        if attempts > 200 * total + 1000:
            raise ContractViolation("cannot draw {} distinct prompts for {}".format(total, what))
        ex = make(i)
        if ex.prompt in seen:
            continue
        seen.add(ex.prompt)
        examples.append(ex)
        i += 1
    return examples


def _labelled_task(spec, seed, rule, draw, disjoint=False):
    total = sum(spec.sizes)
    if min(spec.sizes) < 0 or total == 0:
        raise ContractViolation("task sizes must be non-negative with at least one example")
    rng = substream(seed, "task", spec.name)
    targets = [rule.labels[i % len(rule.labels)] for i in range(total)]
    rng.shuffle(targets)
    instruction = spec.instruction or rule.instruction

    def make(i):
        label = targets[i]
        payload = draw(rng, label)
        if rule.label_of(payload) != label:
            raise AssertionError("rule {} drew a payload with the wrong label".format(rule.name))
        return Example(_prompt(spec.support_tag, instruction, payload), label)

    examples = _unique_examples(total, make, spec.name)
    return _split(spec.name, CLASSIFICATION, examples, spec, rule.labels, disjoint)


def make_classification_task(spec, seed):
    """Balanced classification task for one of CLASSIFICATION_RULES."""
    rule = CLASSIFICATION_RULES.get(spec.rule)
    if rule is None:
        raise UnknownRuleError("unknown classification rule: {}".format(spec.rule))
    return _labelled_task(spec, seed, rule, rule.draw)


def make_generation_task(spec, seed):
    """Task whose answer is a transformation of the prompt payload."""
    if spec.rule not in TRANSFORMATIONS:
        raise UnknownRuleError("unknown transformation: {}".format(spec.rule))
    instruction, transform = TRANSFORMATIONS[spec.rule]
    instruction = spec.instruction or instruction
    rng = substream(seed, "task", spec.name)

    def make(i):
        payload = _letters(rng, 3, 8)
        return Example(_prompt(spec.support_tag, instruction, payload), transform(payload))

    examples = _unique_examples(sum(spec.sizes), make, spec.name)
    return _split(spec.name, GENERATION, examples, spec)


def _draw_shared(rule):
    def draw(rng, label):
        while True:
            payload = shared_payload(rng)
            if rule.label_of(payload) == label:
                return payload
    return draw


def make_disjoint_suite(n_tasks, seed, n_train=200, n_validation=None, n_test=None):
    """Tasks over one payload distribution, told apart only by a sentinel prefix."""
    if not 1 <= n_tasks <= len(SENTINELS):
        raise ContractViolation("n_tasks must be in [1, {}]".format(len(SENTINELS)))
    suite = []
    for i, rule in enumerate(list(DISJOINT_RULES.values())[:n_tasks]):
        spec = TaskSpec(CLASSIFICATION, rule.name, n_train, n_validation, n_test,
                        support_tag=SENTINELS[i], task_id="disjoint{}_{}".format(i, rule.name))
        suite.append(_labelled_task(spec, seed, rule, _draw_shared(rule), disjoint=True))
    return suite


def default_classification_suite(seed, n_train=200, n_validation=None, n_test=None):
    return [make_classification_task(TaskSpec(CLASSIFICATION, rule, n_train, n_validation, n_test), seed)
            for rule in DEFAULT_CLASSIFICATION]


def default_generation_suite(seed, n_train=200, n_validation=None, n_test=None):
    return [make_generation_task(TaskSpec(GENERATION, rule, n_train, n_validation, n_test), seed)
            for rule in DEFAULT_GENERATION]


def supports_disjoint(tasks):
    """True iff every task is tagged support-disjoint and no prompt is shared."""
    tags = [t.support_tag for t in tasks]
    if not all(t.support_disjoint for t in tasks) or len(set(tags)) != len(tags):
        return False
    prompt_sets = [set(ex.prompt for ex in t.examples) for t in tasks]
    for i in range(len(prompt_sets)):
        for j in range(i + 1, len(prompt_sets)):
            if prompt_sets[i] & prompt_sets[j]:
                return False
    return True


# --------------------------------------------------------------------------- #
# JSONL files
# --------------------------------------------------------------------------- #

def write_tasks(tasks, directory):
    """One ``<task_id>.jsonl`` per task plus a ``suite.json`` index."""
    os.makedirs(directory, exist_ok=True)
    index = []
    for task in tasks:
        path = os.path.join(directory, task.task_id + ".jsonl")
        with open(path, "w", encoding="utf-8") as f:
            for record in task.records():
                f.write(json.dumps(record, ensure_ascii=True, sort_keys=True) + "\n")
        index.append({"task": task.task_id, "kind": task.kind, "labels": list(task.labels),
                      "support_tag": task.support_tag, "support_disjoint": task.support_disjoint,
                      "file": os.path.basename(path)})
        logger.debug("wrote %s (%d examples)", path, len(task.examples))
    with open(os.path.join(directory, SUITE_INDEX), "w", encoding="utf-8") as f:
        json.dump(index, f, indent=2, sort_keys=True)
        f.write("\n")
    return index


def read_task(path):
    """Load one task from its JSONL file, using ``suite.json`` metadata when present."""
    examples, splits = [], {name: [] for name in SPLITS}
    task_id = None
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            task_id = task_id or record["task"]
            if record["split"] not in splits:
                raise ContractViolation("unknown split {!r} in {}".format(record["split"], path))
            splits[record["split"]].append(len(examples))
            examples.append(Example(record["prompt"], record["answer"]))
    if task_id is None:
        raise ContractViolation("empty task file: {}".format(path))

    meta = {}
    index_path = os.path.join(os.path.dirname(path), SUITE_INDEX)
    if os.path.isfile(index_path):
        with open(index_path, encoding="utf-8") as f:
            meta = {entry["task"]: entry for entry in json.load(f)}.get(task_id, {})
    labels = sorted(set(ex.answer for ex in examples))
    kind = meta.get("kind") or (CLASSIFICATION if len(labels) <= 3 else GENERATION)
    return TaskDataset(task_id, kind, examples, splits,
                       support_tag=meta.get("support_tag", ""),
                       support_disjoint=meta.get("support_disjoint", False),
                       labels=tuple(meta.get("labels", labels if kind == CLASSIFICATION else ())))


def read_tasks(paths):
    """Tasks from files or directories (every ``*.jsonl`` inside, sorted)."""
    tasks = []
    for path in paths:
        if os.path.isdir(path):
            files = sorted(os.path.join(path, name) for name in os.listdir(path) if name.endswith(".jsonl"))
            tasks.extend(read_task(f) for f in files)
        else:
            tasks.append(read_task(path))
    return tasks
