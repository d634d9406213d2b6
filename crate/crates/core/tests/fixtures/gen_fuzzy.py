"""Regenerates fuzzy_pairs.jsonl from difflib.SequenceMatcher."""
import difflib
import json
import random

rng = random.Random(20240607)
alphabets = ["ab", "abc ", "abcdefgh", "the quick brown fox", "abcdefghijklmnopqrstuvwxyz0123456789 ", "aé中 b"]

with open("fuzzy_pairs.jsonl", "w", encoding="utf-8") as f:
    for i in range(1000):
        alpha = alphabets[i % len(alphabets)]
        a = "".join(rng.choice(alpha) for _ in range(rng.randint(0, 64)))
        if rng.random() < 0.3:
            b = list(a)
            for _ in range(rng.randint(0, 8)):
                op = rng.random()
                pos = rng.randint(0, len(b))
                if op < 0.4:
                    b.insert(pos, rng.choice(alpha))
                elif b and op < 0.7:
                    del b[min(pos, len(b) - 1)]
                elif b:
                    b[min(pos, len(b) - 1)] = rng.choice(alpha)
            b = "".join(b)[:64]
        else:
            b = "".join(rng.choice(alpha) for _ in range(rng.randint(0, 64)))
        m = difflib.SequenceMatcher(None, a, b, autojunk=False)
        matches = sum(t.size for t in m.get_matching_blocks())
        f.write(json.dumps({"a": a, "b": b, "matches": matches, "ratio": m.ratio()}, ensure_ascii=False) + "\n")
