"""memecap: a desk-scale, fully testable meme-caption pipeline.

Sub-image-aware corpus handling, multi-granularity image-text attention
alignment, KL-regularized supervised fine-tuning, preference-based reward
modeling, RL refinement with a KL leash, caption metrics, and a human
annotation service.
"""

__version__ = "0.1.0"
