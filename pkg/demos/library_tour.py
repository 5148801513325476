"""The building blocks from Python, no training involved. Runs in a few seconds.

    python demos/library_tour.py
"""

from obfusdetect import tokenizer as tk
from obfusdetect.corpus import synth_corpus
from obfusdetect.normalizer import denormalize, normalize
from obfusdetect.obfugen import Technique, deobfuscate_oracle, obfuscate_log
from obfusdetect.trainer import focal_loss

raw = "cmd.exe /c start http://10.1.2.3/a.bat {7C3D9E21-4B6A-4F0E-9A52-1D8E6B0C3F47} 2024-03-01 8080"
nc = normalize(raw)
print("normalized :", nc.text)
assert denormalize(nc) == raw

corpus = [normalize(l.raw).text for l in synth_corpus(0, 3000)]
tok = tk.train(corpus, 1200)
seq = tk.encode(tok, nc.text)
print("pieces     :", [tok.tokens[i] for i in seq.ids])
assert tk.decode(tok, seq) == nc.text

for tech in (Technique.CARET_INSERTION, Technique.STRING_CONCATENATE, Technique.ENCODING_BXOR, Technique.CASE_MIXING):
    cmd = "powershell.exe -NoProfile Get-ChildItem 'C:\\Users\\Public'" if tech is not Technique.CARET_INSERTION \
        else "cmd.exe /c whoami /all"
    s = obfuscate_log(cmd, tech, seed=4, intensity=0.6)
    print(f"{tech.value:<20}: {s.obfuscated}")
    back = deobfuscate_oracle(tech, s.obfuscated)
    assert back == cmd or back.casefold() == cmd.casefold()

# a confident correct prediction costs almost nothing under gamma=2
for p in (0.5, 0.9, 0.99):
    print(f"p_t={p:<5} CE={focal_loss(p, 0.0):.5f} FL={focal_loss(p, 2.0):.5f}")
