"""Regenerate the golden files under tests/fixtures.

Run after an intentional change to the synthetic corpus generator:

    python tests/fixtures/make_goldens.py
"""

from pathlib import Path

from obfusdetect.corpus import synth_corpus, write_logs

HERE = Path(__file__).resolve().parent

if __name__ == "__main__":
    write_logs(HERE / "synth_corpus_seed0_n5.jsonl", synth_corpus(0, 5))
    print("wrote", HERE / "synth_corpus_seed0_n5.jsonl")
