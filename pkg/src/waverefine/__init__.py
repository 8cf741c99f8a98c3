"""Reference-guided diffusion engine for conditional waveform synthesis.

Submodules:
    numerics   -- differentiable building blocks + finite-difference oracle
    dsp        -- STFT/ISTFT, mel analysis, degradation pipeline, WAV I/O
    diffusion  -- noise schedules, forward/reverse process, training loss
    network    -- dual-branch denoiser with LVC upsampling and low-frequency path
    data       -- synthetic toy corpus, manifests, condition tracks
    training   -- two-phase training loop, crops, checkpoints
    evaluation -- SNR / LSD / STOI / F0 metrics and ablation harnesses
    cli        -- command-line entry point
"""

__version__ = "0.1.0"
