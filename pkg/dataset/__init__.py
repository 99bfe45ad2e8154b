"""Element storage, synthetic data, augmentation and geographic splits."""
from dataset.augmentation import augment_cloud, augment_image
from dataset.dataset import Dataset, Element, run_split, utm_split
from dataset.synthetic import SyntheticSpec, generate_synthetic

__all__ = ['augment_cloud', 'augment_image', 'Dataset', 'Element', 'run_split', 'utm_split',
           'SyntheticSpec', 'generate_synthetic']
