"""Writes the golden files with nothing but the Python standard library."""
import struct, zlib, math, os
out = os.path.dirname(os.path.abspath(__file__))
os.makedirs(out, exist_ok=True)

def lrtf(dtype, dims, payload):
    head = b"LRTF" + struct.pack("<HBB", 1, dtype, len(dims)) + b"".join(struct.pack("<I", d) for d in dims)
    return head + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)

f32 = [0.0, 1.5, -2.25, 1024.0, 0.1, -3.0e-5]
open(f"{out}/tensor_f32_2x3.lrtf", "wb").write(lrtf(0, [2, 3], b"".join(struct.pack("<f", v) for v in f32)))
open(f"{out}/tensor_u8_2x2.lrtf", "wb").write(lrtf(1, [2, 2], bytes([0, 1, 127, 255])))
open(f"{out}/tensor_f32_empty.lrtf", "wb").write(lrtf(0, [0, 4], b""))

def num(x):
    s = "%.9f" % x
    s = s.rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s

lines = ["https://example.invalid/golden-orbit"]
for j in range(4):
    a = 0.1 * j
    c, s = math.cos(a), math.sin(a)
    r = [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]]
    t = [-0.25 * j, 0.0, 0.125 * j]
    fields = [str(33366667 * j)] + [num(v) for v in (0.5, 0.6666666666666666, 0.5, 0.5)] + ["0", "0"]
    for row in range(3):
        fields += [num(r[row][0]), num(r[row][1]), num(r[row][2]), num(t[row])]
    lines.append(" ".join(fields))
open(f"{out}/trajectory_orbit.txt", "w").write("\n".join(lines) + "\n")
