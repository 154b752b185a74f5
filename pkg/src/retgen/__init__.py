"""retgen: an ensemble of retrieval-based and generation-based dialog systems.

A query is answered twice -- once by searching an indexed database of
query-reply pairs, once by a GRU encoder-decoder conditioned on the query and
the retrieved reply -- and a learned matching scorer picks the final answer.
"""

__version__ = "0.1.0"
