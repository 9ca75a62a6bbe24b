# Test package for the label fusion toolkit
