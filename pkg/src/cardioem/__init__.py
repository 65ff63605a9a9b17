"""Desk-scale 3D cardiac electromechanics coupled to a 0D closed-loop
circulation: nested hexahedral meshes, monodomain electrophysiology,
active-tension generation, Guccione mechanics with a volumetric-constraint
saddle-point coupling, and stress-free reference-configuration recovery."""

__version__ = "0.1.0"
