"""Print one copy-task sample (n=5, distance 256) as whitespace-separated ids."""

from expirespan.tasks import CopyConfig, copy_sample

s = copy_sample(5, CopyConfig(distance=256))
print(" ".join(str(int(t)) for t in s.input_tokens))
