"""Descriptor-enhanced region classification at desk scale.

Two flows share one dictionary of fine-grained text descriptors:

* the prompt flow, where a small meta-net turns a context feature into an
  additive prompt on the region feature (``descdet.prompt``);
* the descriptor flow, where usage and confusion statistics drive periodic
  LLM queries that prune, grow and merge the dictionary (``descdet.llm``).

``descdet.sim`` supplies a synthetic world standing in for the image/text
encoders, the dataset and the LLM.
"""

from descdet.descriptors import CategoryEntry, Descriptor, DescriptorDictionary
from descdet.errors import DescDetError

__all__ = ["CategoryEntry", "Descriptor", "DescriptorDictionary", "DescDetError"]
__version__ = "0.1.0"
