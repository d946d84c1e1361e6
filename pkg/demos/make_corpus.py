"""Write demos/corpus.txt: the package's own source text, a small byte corpus."""

from pathlib import Path

root = Path(__file__).resolve().parent
src = sorted((root.parent / "src" / "expirespan").glob("*.py"))
text = b"".join(p.read_bytes() for p in src)
(root / "corpus.txt").write_bytes(text)
print(f"wrote {len(text)} bytes from {len(src)} files")
