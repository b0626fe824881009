"""abpkit: pulsatile-signal to arterial-blood-pressure waveform translation.

Subpackages cover the full desk-scale workflow: a reverse-mode autodiff
engine (``autodiff``), signal preprocessing (``signals``), differentiable
objectives (``losses``), seq2seq models (``models``), two-stage training
(``training``), metrics (``evaluation``), robustness transforms
(``ablation``), a synthetic cohort generator (``synthetic``), file formats
(``storage``), and the batch CLI (``cli``).
"""

__version__ = "0.1.0"
