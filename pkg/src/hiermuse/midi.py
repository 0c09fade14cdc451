"""MIDI ingestion and corpus plumbing.

Covers Standard MIDI File (format 0/1) decoding and encoding, quantization
of note events onto a semiquaver grid, sidecar section-annotation files,
deterministic corpus splitting, and a round-trippable text piano roll.

Sections are annotated in a line-oriented sidecar file (``<label> <start>
<length>`` per line, note-index units) that lives next to the ``.mid`` file
with a ``.sections`` suffix.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SECTION_LABELS = ("intro", "verse", "chorus", "bridge", "outro", "other")

STEPS_PER_QUARTER = 4   # semiquaver grid
STEPS_PER_BAR = 16      # 4/4 assumed throughout
DEFAULT_TEMPO_BPM = 120.0

NOTE_NAMES = ("C", "Db", "D", "Eb", "E", "F", "F#", "G", "Ab", "A", "Bb", "B")


@dataclass
class NoteEvent:
    """A resolved note with onset/duration in absolute ticks."""

    pitch: int
    onset: int
    duration: int
    velocity: int = 64
    track: int = 0

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch out of range: {self.pitch}")
        if self.duration < 1:
            raise ValueError(f"duration must be >= 1 tick, got {self.duration}")
        if self.onset < 0:
            raise ValueError(f"onset must be >= 0, got {self.onset}")


@dataclass
class TokenSequence:
    """Quantized note events on the semiquaver grid.

    ``tokens`` are (pitch, onset_step, duration_steps) triples ordered by
    onset; simultaneous notes are separate tokens sharing an onset step.
    """

    tokens: list[tuple[int, int, int]]
    bar_length: int = STEPS_PER_BAR
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        onsets = [t[1] for t in self.tokens]
        if any(o < 0 for o in onsets):
            raise ValueError("onset steps must be >= 0")
        if any(t[2] < 1 for t in self.tokens):
            raise ValueError("duration steps must be >= 1")
        if onsets != sorted(onsets):
            raise ValueError("tokens must be ordered by onset step")

    def __len__(self):
        return len(self.tokens)

    @property
    def total_steps(self) -> int:
        if not self.tokens:
            return 0
        return max(o + d for _, o, d in self.tokens)

    @property
    def bar_count(self) -> int:
        return -(-self.total_steps // self.bar_length) if self.tokens else 0

    @property
    def tempo_bpm(self) -> float:
        return float(self.meta.get("tempo_bpm", DEFAULT_TEMPO_BPM))

    def bar_of_note(self, index: int) -> int:
        return self.tokens[index][1] // self.bar_length

    def note_range_of_bars(self, start_bar: int, end_bar: int) -> tuple[int, int]:
        """Note-index interval [lo, hi) of tokens whose onset falls in bars [start_bar, end_bar)."""
        lo = len(self.tokens)
        hi = 0
        for i, (_, onset, _) in enumerate(self.tokens):
            b = onset // self.bar_length
            if start_bar <= b < end_bar:
                lo = min(lo, i)
                hi = max(hi, i + 1)
        if lo >= hi:
            return (0, 0)
        return (lo, hi)


@dataclass
class SectionAnnotation:
    """A labeled half-open note-index interval [start, start + length)."""

    label: str
    start: int
    length: int

    def __post_init__(self):
        if self.length < 1:
            raise ValueError(f"section length must be >= 1, got {self.length}")
        if self.start < 0:
            raise ValueError(f"section start must be >= 0, got {self.start}")

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass
class ParsedMidi:
    events: list[NoteEvent]
    ticks_per_quarter: int
    tempo_bpm: float = DEFAULT_TEMPO_BPM


# -- Standard MIDI File codec --------------------------------------------------


def _read_vlq(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    while True:
        if pos >= len(data):
            raise ValueError("truncated MIDI file inside variable-length quantity")
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos


def _write_vlq(value: int) -> bytes:
    if value < 0:
        raise ValueError("negative delta time")
    chunks = [value & 0x7F]
    value >>= 7
    while value:
        chunks.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(chunks))


def parse_midi(data: bytes) -> ParsedMidi:
    """Decode a format 0/1 Standard MIDI File into resolved NoteEvents.

    Note-on/note-off pairs are matched per (track, channel, pitch); note-ons
    left open at track end are closed there with a warning. The first tempo
    meta event sets the file tempo (default 120 BPM).
    """
    if len(data) < 14 or data[:4] != b"MThd":
        raise ValueError("not a Standard MIDI File (missing MThd)")
    header_len, fmt, ntracks, division = struct.unpack(">IHHH", data[4:14])
    if header_len != 6:
        raise ValueError(f"unexpected MThd length {header_len}")
    if fmt not in (0, 1):
        raise ValueError(f"unsupported MIDI format {fmt}")
    if division & 0x8000:
        raise ValueError("SMPTE time division is not supported")

    events: list[NoteEvent] = []
    tempo_bpm = None
    pos = 14
    for track_index in range(ntracks):
        if pos + 8 > len(data):
            raise ValueError(f"truncated MIDI file: missing track {track_index}")
        if data[pos:pos + 4] != b"MTrk":
            raise ValueError(f"bad track chunk id at byte {pos}")
        track_len = struct.unpack(">I", data[pos + 4:pos + 8])[0]
        body_start = pos + 8
        body_end = body_start + track_len
        if body_end > len(data):
            raise ValueError(f"truncated MIDI file: track {track_index} body")

        tick = 0
        p = body_start
        running_status = None
        open_notes: dict[tuple[int, int], list[tuple[int, int]]] = {}
        while p < body_end:
            delta, p = _read_vlq(data, p)
            tick += delta
            status = data[p]
            if status & 0x80:
                p += 1
                if status < 0xF0:
                    running_status = status
            else:
                if running_status is None:
                    raise ValueError("running status without prior status byte")
                status = running_status

            if status == 0xFF:  # meta
                meta_type = data[p]
                length, p = _read_vlq(data, p + 1)
                payload = data[p:p + length]
                p += length
                if meta_type == 0x51 and length == 3 and tempo_bpm is None:
                    usec_per_quarter = int.from_bytes(payload, "big")
                    tempo_bpm = 60_000_000.0 / usec_per_quarter
                if meta_type == 0x2F:
                    break
            elif status in (0xF0, 0xF7):  # sysex
                length, p = _read_vlq(data, p)
                p += length
            else:
                kind = status & 0xF0
                channel = status & 0x0F
                if kind in (0x80, 0x90, 0xA0, 0xB0, 0xE0):
                    d1, d2 = data[p], data[p + 1]
                    p += 2
                elif kind in (0xC0, 0xD0):
                    d1, d2 = data[p], 0
                    p += 1
                else:
                    raise ValueError(f"unsupported status byte 0x{status:02x}")

                if kind == 0x90 and d2 > 0:
                    open_notes.setdefault((channel, d1), []).append((tick, d2))
                elif kind == 0x80 or (kind == 0x90 and d2 == 0):
                    stack = open_notes.get((channel, d1))
                    if stack:
                        onset, velocity = stack.pop(0)
                        events.append(NoteEvent(
                            pitch=d1, onset=onset, duration=max(1, tick - onset),
                            velocity=velocity, track=track_index))
        for (channel, pitch), stack in open_notes.items():
            for onset, velocity in stack:
                logger.warning("unmatched note-on (pitch %d, track %d); closing at track end",
                               pitch, track_index)
                events.append(NoteEvent(pitch=pitch, onset=onset,
                                        duration=max(1, tick - onset),
                                        velocity=velocity, track=track_index))
        pos = body_end

    events.sort(key=lambda e: (e.onset, e.track, e.pitch))
    return ParsedMidi(events=events, ticks_per_quarter=division,
                      tempo_bpm=tempo_bpm if tempo_bpm is not None else DEFAULT_TEMPO_BPM)


def write_midi(events: list[NoteEvent], ticks_per_quarter: int = 480,
               tempo_bpm: float = DEFAULT_TEMPO_BPM) -> bytes:
    """Encode NoteEvents as a format 1 SMF, one chunk per source track."""
    track_ids = sorted({e.track for e in events}) or [0]
    chunks = []
    for i, track_id in enumerate(track_ids):
        msgs: list[tuple[int, int, bytes]] = []
        if i == 0:
            usec = int(round(60_000_000 / tempo_bpm))
            msgs.append((0, 0, b"\xff\x51\x03" + usec.to_bytes(3, "big")))
        for e in events:
            if e.track != track_id:
                continue
            msgs.append((e.onset, 1, bytes([0x90, e.pitch, e.velocity])))
            msgs.append((e.onset + e.duration, 0, bytes([0x80, e.pitch, 0])))
        msgs.sort(key=lambda m: (m[0], m[1]))
        body = bytearray()
        prev_tick = 0
        for tick, _, msg in msgs:
            body += _write_vlq(tick - prev_tick) + msg
            prev_tick = tick
        body += _write_vlq(0) + b"\xff\x2f\x00"
        chunks.append(b"MTrk" + struct.pack(">I", len(body)) + bytes(body))

    header = b"MThd" + struct.pack(">IHHH", 6, 1, len(chunks), ticks_per_quarter)
    return header + b"".join(chunks)


# -- quantization ---------------------------------------------------------------


def _snap(value: float) -> int:
    """Nearest integer with exact ties toward the earlier step."""
    return int(np.ceil(value - 0.5))


def quantize(parsed: ParsedMidi | list[NoteEvent], ticks_per_quarter: int | None = None,
             steps_per_quarter: int = STEPS_PER_QUARTER, bar_length: int = STEPS_PER_BAR,
             source: str = "", tempo_bpm: float | None = None) -> TokenSequence:
    """Snap events to the semiquaver grid; zero-length results are clamped to 1 step."""
    if isinstance(parsed, ParsedMidi):
        events = parsed.events
        ticks_per_quarter = parsed.ticks_per_quarter
        tempo_bpm = parsed.tempo_bpm if tempo_bpm is None else tempo_bpm
    else:
        events = parsed
        if ticks_per_quarter is None:
            raise ValueError("ticks_per_quarter required when passing a raw event list")
    step_ticks = ticks_per_quarter / steps_per_quarter
    tokens = []
    total_drift = 0.0
    for e in events:
        onset_step = _snap(e.onset / step_ticks)
        dur_steps = max(1, _snap(e.duration / step_ticks))
        total_drift += abs(e.onset - onset_step * step_ticks)
        tokens.append((e.pitch, onset_step, dur_steps))
    tokens.sort(key=lambda t: (t[1], t[0], t[2]))
    if tokens:
        logger.debug("quantize: mean |snap| = %.3f ticks over %d notes",
                     total_drift / len(tokens), len(tokens))
    meta = {"source": source, "tempo_bpm": tempo_bpm if tempo_bpm is not None else DEFAULT_TEMPO_BPM,
            "steps_per_quarter": steps_per_quarter}
    return TokenSequence(tokens=tokens, bar_length=bar_length, meta=meta)


def quantize_steps(seq: TokenSequence) -> TokenSequence:
    """Re-snap an already-quantized sequence (idempotence anchor)."""
    tokens = sorted(seq.tokens, key=lambda t: (t[1], t[0], t[2]))
    return TokenSequence(tokens=tokens, bar_length=seq.bar_length, meta=dict(seq.meta))


# -- section annotations ---------------------------------------------------------


def load_annotations(path, note_count: int | None = None,
                     labels: tuple = SECTION_LABELS) -> list[SectionAnnotation]:
    """Read a ``.sections`` sidecar file; rejects bad lines with their number.

    Lines are ``<label> <start> <length>``; ``#`` starts a comment. Spans must
    be ordered, non-overlapping, and (when ``note_count`` is given) in bounds.
    """
    annotations = []
    prev_end = 0
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'label start length', got {raw!r}")
        label, start_s, length_s = parts
        if label not in labels:
            raise ValueError(f"{path}:{lineno}: unknown section label {label!r}")
        try:
            start, length = int(start_s), int(length_s)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: start/length must be integers") from None
        if length < 1 or start < 0:
            raise ValueError(f"{path}:{lineno}: invalid span [{start}, {start + length})")
        if start < prev_end:
            raise ValueError(f"{path}:{lineno}: span overlaps or precedes previous section")
        if note_count is not None and start + length > note_count:
            raise ValueError(f"{path}:{lineno}: span [{start}, {start + length}) "
                             f"exceeds sequence bounds ({note_count} notes)")
        annotations.append(SectionAnnotation(label=label, start=start, length=length))
        prev_end = start + length
    return annotations


def write_annotations(path, annotations: list[SectionAnnotation]):
    lines = [f"{a.label} {a.start} {a.length}" for a in annotations]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def sidecar_path(midi_path) -> Path:
    return Path(midi_path).with_suffix(".sections")


# -- dataset split ----------------------------------------------------------------


def split_dataset(items: list, seed: int = 0) -> dict:
    """Deterministic 80/10/10 split (validation/test counts rounded to nearest)."""
    n = len(items)
    if n < 3:
        raise ValueError(f"corpus too small to split: {n} items (need >= 3)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_val = max(1, int(round(0.1 * n)))
    n_test = max(1, int(round(0.1 * n)))
    val_idx = order[:n_val]
    test_idx = order[n_val:n_val + n_test]
    train_idx = order[n_val + n_test:]
    return {
        "train": [items[i] for i in sorted(train_idx)],
        "validation": [items[i] for i in sorted(val_idx)],
        "test": [items[i] for i in sorted(test_idx)],
    }


def save_manifest(path, split: dict, section_counts: dict | None = None):
    payload = {
        "files": {part: [str(x) for x in names] for part, names in split.items()},
        "section_counts": section_counts or {},
        "total_sections": sum((section_counts or {}).values()),
    }
    Path(path).write_text(json.dumps(payload, indent=2))


def load_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


# -- piano roll -------------------------------------------------------------------

ROLL_EMPTY = "."
ROLL_ONSET = "O"
ROLL_SUSTAIN = "="


def render_piano_roll(seq: TokenSequence, out_path=None, highlights=None,
                      pitch_range: tuple[int, int] | None = None) -> str:
    """Render a UTF-8 text grid (rows = pitches high to low, cols = steps).

    ``highlights`` is a list of (label, start_step, end_step) spans drawn as
    ruler lines above the grid. The output parses back via
    ``parse_piano_roll``.
    """
    cols = seq.total_steps
    if pitch_range is None:
        pitches = [p for p, _, _ in seq.tokens]
        pitch_range = (min(pitches), max(pitches)) if pitches else (60, 59)
    lo, hi = pitch_range
    rows = max(0, hi - lo + 1)

    lines = [f"# piano-roll rows={rows} cols={cols} pitch_min={lo}"]
    for label, start, end in highlights or []:
        ruler = [" "] * cols
        for c in range(max(0, start), min(cols, end)):
            ruler[c] = "-"
        if 0 <= start < cols:
            ruler[start] = "["
        if 0 <= end - 1 < cols:
            ruler[end - 1] = ")"
        lines.append(f"# span {label} [{start},{end}) |{''.join(ruler)}|")

    grid = np.full((rows, cols), ROLL_EMPTY, dtype="<U1")
    for pitch, onset, dur in seq.tokens:
        if not lo <= pitch <= hi:
            continue
        r = hi - pitch
        for c in range(onset, min(onset + dur, cols)):
            if grid[r, c] == ROLL_EMPTY:
                grid[r, c] = ROLL_SUSTAIN
        grid[r, onset] = ROLL_ONSET
    for r in range(rows):
        pitch = hi - r
        name = f"{NOTE_NAMES[pitch % 12]}{pitch // 12 - 1}"
        lines.append(f"{pitch:4d} {name:>4} |{''.join(grid[r])}|")

    text = "\n".join(lines) + "\n"
    if out_path is not None:
        Path(out_path).write_text(text)
    return text


def parse_piano_roll(text: str) -> set[tuple[int, int, int]]:
    """Recover the (pitch, onset, duration) token set from a rendered grid."""
    tokens = set()
    for line in text.splitlines():
        if line.startswith("#") or "|" not in line:
            continue
        head, grid = line.split("|", 1)
        grid = grid.rstrip("|")
        pitch = int(head.split()[0])
        c = 0
        while c < len(grid):
            if grid[c] == ROLL_ONSET:
                d = 1
                while c + d < len(grid) and grid[c + d] == ROLL_SUSTAIN:
                    d += 1
                tokens.add((pitch, c, d))
                c += d
            else:
                c += 1
    return tokens
