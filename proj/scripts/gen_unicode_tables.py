"""Writes src/unicode_tables.inc: punctuation ranges, whitespace code points
and simple lowercase mappings, all from Python's unicodedata."""
import sys
import unicodedata

def ranges(pred):
    out, start = [], None
    for cp in range(0x110000):
        if pred(cp):
            if start is None:
                start = cp
        elif start is not None:
            out.append((start, cp - 1))
            start = None
    if start is not None:
        out.append((start, 0x10FFFF))
    return out

punct = ranges(lambda cp: unicodedata.category(chr(cp)).startswith("P"))
space = [cp for cp in range(0x110000) if chr(cp).isspace()]
lower = []
for cp in range(0x110000):
    ch = chr(cp)
    lo = ch.lower()
    if len(lo) == 1 and lo != ch and lo.lower() == lo:
        lower.append((cp, ord(lo)))

lines = ["// Generated by scripts/gen_unicode_tables.py (Unicode %s). Do not edit." % unicodedata.unidata_version, ""]
lines.append("constexpr CodeRange kPunctuation[] = {")
lines += ["    {0x%04X, 0x%04X}," % r for r in punct]
lines.append("};")
lines.append("")
lines.append("constexpr char32_t kWhitespace[] = {")
lines += ["    0x%04X," % cp for cp in space]
lines.append("};")
lines.append("")
lines.append("constexpr CaseMapping kLowercase[] = {")
lines += ["    {0x%04X, 0x%04X}," % m for m in lower]
lines.append("};")
open(sys.argv[1], "w").write("\n".join(lines) + "\n")
