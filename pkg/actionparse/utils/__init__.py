# Utils module