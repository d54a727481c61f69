"""bevgraph: monocular bird's-eye-view object localization on scene graphs.

Detections in a single camera image become nodes of a Euclidean scene
graph; attention-weighted message passing refines jointly embedded
appearance and position states for nodes and edges, and readout heads
decode bird's-eye-view positions, orientations, dimensions and classes.
"""

__version__ = "0.1.0"
