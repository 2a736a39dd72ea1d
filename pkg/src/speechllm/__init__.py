"""Toy speech-encoder -> projector -> LLM-decoder ASR with staged finetuning."""

__version__ = "0.1.0"
