# Action-tree parsing toolkit
