"""Writes registry_v1.log from the documented line format alone (no package imports)."""

import hashlib
import json
from pathlib import Path

ALPHABET = "0123456789ABCDEFGHJKMNPQRSTVWXYZ"


def code(body):
    return body + ALPHABET[sum((2 * i + 1) * ALPHABET.index(c) for i, c in enumerate(body)) % 32]


def line(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n"


def fp_text(mag, opt):
    fmt = lambda xs: "[" + ",".join(format(v, ".9g") for v in xs) + "]"
    return f'{{"format_version":1,"grid_size":4,"magnetic_grid":{fmt(mag)},"optical_grid":{fmt(opt)}}}'


old = {"batch_number": "B001", "manufacturer_id": "acme", "product_name": "drugX", "serial_number": "000001"}
new = {"batch_number": "reseal", "manufacturer_id": "douane-é", "product_name": "drugX", "serial_number": "000001"}
mag = [float(i) for i in range(16)]
opt = [float(format(1.0 - i / 20, ".9g")) for i in range(16)]  # fingerprints carry 9 significant digits
fingerprint = {"format_version": 1, "grid_size": 4, "magnetic_grid": mag, "optical_grid": opt}
digest = hashlib.sha256(fp_text(mag, opt).encode()).hexdigest()

events = [
    ("Minted", "product/acme/drugX/B001/000001",
     {"secret": code("0123456789ABCDEF"), "inspection_secret": code("GHJKMNPQRSTVWXYZ"), "lineage": None}, "12:00:00"),
    ("Verified", "product/acme/drugX/B001/000001", {"verdict": "genuine", "channel": "primary"}, "12:05:00"),
    ("Verified", "product/acme/drugX/B001/000001", {"verdict": "previously_verified", "channel": "primary"}, "12:06:30"),
    ("Verified", "product/acme/drugX/B001/000001", {"verdict": "counterfeit", "channel": None}, "12:07:00"),
    ("Resealed", "product/acme/drugX/B001/000001", {"successor": new, "authority": "douane-é"}, "13:00:00"),
    ("Minted", "product/douane-%C3%A9/drugX/reseal/000001",
     {"secret": code("ZYXWVTSRQPNMKJHG"), "inspection_secret": None, "lineage": old}, "13:00:00"),
    ("NoteEnrolled", "note/EUR/N0001", {"denomination": 5000, "fingerprint": fingerprint}, "14:00:00"),
    ("NoteVerified", "note/EUR/N0001",
     {"verdict": "authentic", "similarity": 1.0, "threshold": 0.66, "digest": digest, "fingerprint": fingerprint}, "14:10:00"),
]

out = line({"format_version": 1, "registry_id": "golden"})
for seq, (kind, key, payload, hms) in enumerate(events, start=1):
    out += line({"seq": seq, "kind": kind, "key": key, "payload": payload,
                 "recorded_at": f"2026-03-01T{hms}.000000Z"})
Path(__file__).with_name("registry_v1.log").write_bytes(out.encode("utf-8"))
