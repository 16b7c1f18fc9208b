"""Desk-scale laboratory for deep-transformer training stability and
training-systems experiments: switchable norm schemes and initializers,
packed-document attention masks, rotary-base context extension, the AdamW
training stack, pipeline/context-parallel simulators, and a domain-aware
BPE vocabulary builder."""

__version__ = "0.1.0"
