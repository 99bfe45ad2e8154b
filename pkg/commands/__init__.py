from .data import gen_data
from .diagnose import diagnose
from .evaluate import evaluate
from .gradcheck import gradcheck
from .train import train

__all__ = ['gen_data', 'train', 'evaluate', 'diagnose', 'gradcheck']
